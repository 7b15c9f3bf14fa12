//! Invariant suite behind `atnj selftest`.

use std::path::Path;

use atnj_core::encoder::{
    concept_loss, draw_batch, encode_tokens, patchify, train_encoder, EncoderConfig,
    EncoderWeights, TrainConfig,
};
use atnj_core::formats;
use atnj_core::golden;
use atnj_core::image::{
    decode_pgm, decode_ppm, encode_ppm, mask_to_pgm, toy_dataset, toy_image, ReferenceImage,
    TOY_DATASET_SEED,
};
use atnj_core::injector::{
    cross_attention_inject, extract_mask, masked_self_attention, step_gate, union_masks,
    ConceptFeatures, ConceptMask, InjectionConfig, InjectionProcessor,
};
use atnj_core::pipeline::{identity_proxy, Engine, GenerationRequest, ReferenceInput};
use atnj_core::rng::Rng;
use atnj_core::scheduler::{ddim_inverse_step, ddim_step, NoiseSchedule, ScheduleConfig};
use atnj_core::unet::{
    embed_prompt, AttentionWeights, ModelConfig, ModelWeights, VanillaProcessor,
};
use atnj_core::Tensor;

type Outcome = Result<String, String>;
type Named = (&'static str, fn() -> Outcome);

pub struct Check {
    pub name: &'static str,
    pub outcome: Outcome,
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn rand2(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rng.normal_tensor(r * c).reshape(&[r, c]).unwrap()
}

fn schedule() -> Result<NoiseSchedule, String> {
    NoiseSchedule::new(ScheduleConfig::default()).map_err(e2s)
}

fn model() -> Result<ModelWeights, String> {
    ModelWeights::init(ModelConfig::default(), golden::MODEL_SEED).map_err(e2s)
}

fn check_schedule() -> Outcome {
    let s = schedule()?;
    ensure(s.alpha_bars.windows(2).all(|w| w[1] < w[0]), || {
        "alpha_bar not strictly decreasing".into()
    })?;
    ensure(s.betas.iter().all(|&b| b > 0.0 && b < 1.0), || "beta out of (0,1)".into())?;
    ensure(s.alpha_bars[0] > 0.99, || "first alpha_bar <= 0.99".into())?;
    let want: Vec<usize> = (0..50).map(|i| 1 + 20 * i).collect();
    ensure(s.timesteps == want, || format!("timesteps {:?}", s.timesteps))?;
    Ok(format!("alpha_bar[0]={:.6}", s.alpha_bars[0]))
}

fn check_ddim_single_step() -> Outcome {
    let s = schedule()?;
    let mut rng = Rng::new(31);
    let mut worst = 0.0f32;
    for _ in 0..20 {
        let x = rng.normal_tensor(256);
        let eps = rng.normal_tensor(256);
        let lo = 1 + rng.below(900);
        let hi = lo + 1 + rng.below(99);
        let down = ddim_step(&x, &eps, hi, lo, &s).map_err(e2s)?;
        let back = ddim_inverse_step(&down, &eps, lo, hi, &s).map_err(e2s)?;
        worst = worst.max(back.max_abs_diff(&x).map_err(e2s)?);
    }
    ensure(worst <= 1e-5, || format!("linf {worst:e} > 1e-5"))?;
    Ok(format!("linf {worst:.2e}"))
}

fn check_ddim_full_chain() -> Outcome {
    let engine = Engine::new(model()?, None, schedule()?);
    let prompt = words("a photo of blob");
    let x0 = ReferenceImage::from_rgb8(&toy_image(0, TOY_DATASET_SEED))
        .map_err(e2s)?
        .to_latent();
    let traj = engine.invert(&x0, &prompt).map_err(e2s)?;
    ensure(traj.latents.len() == 51, || "trajectory length != T+1".into())?;
    ensure(traj.latents[0] == x0, || "trajectory[0] differs from input".into())?;
    let rec = engine.reconstruct(&traj, &prompt).map_err(e2s)?;
    let err = rec.max_abs_diff(&x0).map_err(e2s)?;
    ensure(err <= 1e-3, || format!("linf {err:.3e} > 1e-3"))?;
    Ok(format!("linf {err:.3e}"))
}

fn check_param_count() -> Outcome {
    let w = model()?;
    let want = w.config.param_count();
    ensure(w.param_count() == want && want == 27556, || {
        format!("{} params, formula {want}", w.param_count())
    })?;
    Ok(format!("{want} parameters"))
}

fn check_forward_determinism() -> Outcome {
    let w = model()?;
    let prompt = embed_prompt(&words("a photo of blob"), &w.config).map_err(e2s)?;
    let x = Rng::new(8).normal_tensor(256).reshape(&[4, 8, 8]).map_err(e2s)?;
    let (a, ta) = w.forward(&x, 301, &prompt, &mut VanillaProcessor).map_err(e2s)?;
    let (b, tb) = w.forward(&x, 301, &prompt, &mut VanillaProcessor).map_err(e2s)?;
    ensure(a == b && ta == tb, || "two forwards differ".into())?;
    ensure(ta.self_attn.len() == 2 && ta.cross_maps.len() == 2, || {
        "tap does not cover every layer".into()
    })?;
    let worst = ta
        .cross_maps
        .iter()
        .flat_map(|m| m.data().chunks(4).map(|r| r.iter().map(|&v| f64::from(v)).sum::<f64>()))
        .map(|s| (s - 1.0).abs())
        .fold(0.0, f64::max);
    ensure(worst <= 1e-6, || format!("cross-attn row sum off by {worst:e}"))?;
    Ok(format!("row sums within {worst:.1e}"))
}

fn check_processor_indirection() -> Outcome {
    let w = model()?;
    let prompt = embed_prompt(&words("a photo of blob"), &w.config).map_err(e2s)?;
    let x = Rng::new(9).normal_tensor(256).reshape(&[4, 8, 8]).map_err(e2s)?;
    let (vanilla, _) = w.forward(&x, 601, &prompt, &mut VanillaProcessor).map_err(e2s)?;
    let cfg = InjectionConfig {
        enable_self_inject: false,
        enable_cross_inject: false,
        ..InjectionConfig::default()
    };
    let concept = ConceptFeatures::new(Tensor::full(&[3, 32], 1.0));
    let mask = ConceptMask::empty(64);
    let mut proc = InjectionProcessor {
        cfg: &cfg,
        step: 10,
        reference: None,
        concept: &concept,
        mask: &mask,
    };
    let (off, _) = w.forward(&x, 601, &prompt, &mut proc).map_err(e2s)?;
    ensure(off == vanilla, || "disabled injection processor changes output".into())?;
    Ok("bit-exact".into())
}

fn check_mask_law() -> Outcome {
    let mut rng = Rng::new(41);
    for i in 0..100 {
        let a = Tensor::from_vec((0..64).map(|_| rng.next_uniform() as f32).collect());
        let m = extract_mask(&a);
        ensure(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)), || {
            format!("map {i}: value outside [0,1]")
        })?;
        ensure(m.data().contains(&0.0) && m.data().contains(&1.0), || {
            format!("map {i}: extremes not exactly 0 and 1")
        })?;
    }
    let c = extract_mask(&Tensor::full(&[64], 0.7));
    ensure(c.data().iter().all(|&v| v == 0.0), || "constant map not zero".into())?;
    Ok("100 maps + constant".into())
}

fn check_union() -> Outcome {
    let grid = [0.0f32, 0.25, 0.5, 0.75, 1.0];
    let mask = |i: usize| Tensor::from_vec((0..4).map(|p| grid[(i / 5usize.pow(p)) % 5]).collect());
    for i in 0..625 {
        for j in 0..625 {
            let (a, b) = (mask(i), mask(j));
            let u = union_masks(&[a.clone(), b.clone()]).map_err(e2s)?;
            let want: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x.max(*y)).collect();
            ensure(u.data() == want.as_slice(), || format!("pair ({i},{j})"))?;
        }
    }
    Ok("625x625 pairs".into())
}

fn check_gate() -> Outcome {
    let mut n = 0;
    for t in 1..=50 {
        for k in 1..=t {
            let cfg = InjectionConfig {
                k,
                total_steps: t,
                ..InjectionConfig::default()
            };
            for s in 1..=t {
                // Descending timestep index of step s is T - s + 1.
                #[allow(clippy::int_plus_one)]
                let active = t - s + 1 <= t - k;
                ensure(step_gate(s, &cfg) == active, || format!("s={s} k={k} T={t}"))?;
                n += 1;
            }
        }
    }
    Ok(format!("{n} cases"))
}

fn attention_weights(rng: &mut Rng, d: usize) -> AttentionWeights {
    let mut w = || rand2(rng, d, d).scale(0.3);
    AttentionWeights {
        q: w(),
        k: w(),
        v: w(),
        o: w(),
    }
}

fn check_linearity() -> Outcome {
    let mut rng = Rng::new(51);
    let w = attention_weights(&mut rng, 8);
    let (fg, fr) = (rand2(&mut rng, 6, 8), rand2(&mut rng, 6, 8));
    let mask = ConceptMask {
        m_g: Tensor::from_vec((0..6).map(|_| rng.next_uniform() as f32).collect()),
        m_r: Tensor::from_vec((0..6).map(|_| rng.next_uniform() as f32).collect()),
        frozen: true,
        ..ConceptMask::empty(6)
    };
    let prompt = rand2(&mut rng, 3, 8);
    let concept = ConceptFeatures::new(rand2(&mut rng, 2, 8));
    let mut worst = 0.0f32;
    for base in [0.5f32, 1.0, 1.7] {
        let one = InjectionConfig {
            w_s: base,
            w_c: base,
            ..InjectionConfig::default()
        };
        let two = InjectionConfig {
            w_s: 2.0 * base,
            w_c: 2.0 * base,
            ..one.clone()
        };
        let s1 = masked_self_attention(&fg, &fr, &w, &mask, &one, 3).map_err(e2s)?;
        let s2 = masked_self_attention(&fg, &fr, &w, &mask, &two, 3).map_err(e2s)?;
        worst = worst.max(s2.max_abs_diff(&s1.scale(2.0)).map_err(e2s)?);
        let c1 = cross_attention_inject(&fg, &prompt, &concept, &w, &one, 3).map_err(e2s)?;
        let c2 = cross_attention_inject(&fg, &prompt, &concept, &w, &two, 3).map_err(e2s)?;
        worst = worst.max(c2.out.max_abs_diff(&c1.out.scale(2.0)).map_err(e2s)?);
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;
    Ok(format!("max deviation {worst:.1e}"))
}

fn check_identity_proxy() -> Outcome {
    let mut rng = Rng::new(61);
    let x = rng.normal_tensor(256).reshape(&[4, 8, 8]).map_err(e2s)?;
    let m = Tensor::from_vec((0..64).map(|_| rng.next_uniform() as f32).collect());
    let same = identity_proxy(&x, &x, &m).map_err(e2s)?;
    let opposite = identity_proxy(&x.scale(-1.0), &x, &m).map_err(e2s)?;
    ensure((same - 1.0).abs() < 1e-12 && opposite.abs() < 1e-7, || {
        format!("z==x gives {same}, z==-x gives {opposite}")
    })?;
    Ok("closed forms hold".into())
}

fn request(cfg: InjectionConfig, seed: u64) -> Result<GenerationRequest, String> {
    let img = ReferenceImage::from_rgb8(&toy_image(1, TOY_DATASET_SEED)).map_err(e2s)?;
    Ok(GenerationRequest {
        prompt_gen: words("a blob on grass"),
        prompt_ref: words("a photo of blob"),
        reference: ReferenceInput::Image(img),
        concept_image: None,
        cfg: InjectionConfig {
            coarse_token_gen: 1,
            coarse_token_ref: 3,
            ..cfg
        },
        seed,
        jobs: 1,
    })
}

fn check_off_path() -> Outcome {
    let engine = Engine::new(model()?, None, schedule()?);
    let cfg = InjectionConfig {
        enable_self_inject: false,
        enable_cross_inject: false,
        ..InjectionConfig::default()
    };
    let req = request(cfg, 12)?;
    let out = engine.generate(&req).map_err(e2s)?;
    let vanilla = engine.sample_vanilla(&req.prompt_gen, 12).map_err(e2s)?;
    ensure(out.z0_gen.to_le_bytes() == vanilla.to_le_bytes(), || {
        "generate differs from vanilla sampling".into()
    })?;
    Ok("byte-identical".into())
}

fn check_generate_invariants() -> Outcome {
    let engine = Engine::new(model()?, None, schedule()?);
    let req = request(InjectionConfig::default(), 13)?;
    let traj = engine.resolve_trajectory(&req).map_err(e2s)?;
    let before = formats::encode_trajectory(&traj);
    let out = engine.generate(&req).map_err(e2s)?;
    ensure(formats::encode_trajectory(&out.trajectory) == before, || {
        "trajectory modified".into()
    })?;
    ensure(out.mask.freeze_step == Some(2), || {
        format!("freeze step {:?}", out.mask.freeze_step)
    })?;
    let frozen = out.mask_digests[1];
    ensure(out.mask_digests[1..].iter().all(|d| *d == frozen), || {
        "mask changed after freezing".into()
    })?;
    ensure(out.diagnostics.len() == 50 && out.z0_gen.is_finite(), || {
        "diagnostics or output malformed".into()
    })?;
    let again = engine.generate(&req).map_err(e2s)?;
    ensure(again.z0_gen == out.z0_gen, || "second run differs".into())?;
    Ok(format!("identity_proxy {:.6}", out.identity_proxy))
}

fn check_encoder() -> Outcome {
    let cfg = EncoderConfig::default();
    let w = EncoderWeights::init(cfg, golden::ENCODER_SEED).map_err(e2s)?;
    let img = ReferenceImage::from_rgb8(&toy_image(3, TOY_DATASET_SEED)).map_err(e2s)?;
    let mut zero_bias = w.clone();
    zero_bias.patch_proj_b = Tensor::zeros(&[cfg.d_model]);
    let mut doubled = zero_bias.clone();
    doubled.patch_proj_w = zero_bias.patch_proj_w.scale(2.0);
    let a = encode_tokens(&img, &zero_bias).map_err(e2s)?;
    let b = encode_tokens(&img, &doubled).map_err(e2s)?;
    let patches = a.slice_axis(0, 1, 17).map_err(e2s)?;
    let patches2 = b.slice_axis(0, 1, 17).map_err(e2s)?;
    ensure(patches2 == patches.scale(2.0), || "doubling patch_proj is not exact".into())?;
    ensure(patchify(&img, &cfg).map_err(e2s)?.shape() == [16, 192], || "patch layout".into())?;
    Ok("17x32 tokens, exact doubling".into())
}

fn check_training() -> Outcome {
    let m = model()?;
    let before = formats::encode_model(&m);
    let sched = schedule()?;
    let data = toy_dataset()
        .iter()
        .map(ReferenceImage::from_rgb8)
        .collect::<Result<Vec<_>, _>>()
        .map_err(e2s)?;
    let enc = EncoderWeights::init(EncoderConfig::default(), golden::ENCODER_SEED).map_err(e2s)?;
    let cfg = TrainConfig::default();
    let a = train_encoder(&data, &enc, &m, &sched, &cfg, 3, 7, |_, _| {}).map_err(e2s)?;
    let b = train_encoder(&data, &enc, &m, &sched, &cfg, 3, 7, |_, _| {}).map_err(e2s)?;
    ensure(a.trace == b.trace, || "loss trace not reproducible".into())?;
    ensure(formats::encode_model(&m) == before, || "model weights changed".into())?;
    let prompt = embed_prompt(&cfg.prompt, &m.config).map_err(e2s)?;
    let batch = draw_batch(&data, &prompt, &sched, &mut Rng::new(1)).map_err(e2s)?;
    let l = concept_loss(&batch, &a.weights, &m, &sched, &cfg.injection).map_err(e2s)?;
    ensure(l >= 0.0 && l.is_finite(), || format!("loss {l}"))?;
    Ok(format!("trace {:?}", a.trace.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>()))
}

fn check_formats() -> Outcome {
    let m = model()?;
    let enc = EncoderWeights::init(EncoderConfig::default(), 4).map_err(e2s)?;
    let t = Rng::new(3).normal_tensor(24).reshape(&[2, 3, 4]).map_err(e2s)?;
    let engine = Engine::new(m.clone(), None, schedule()?);
    let traj = engine
        .invert(&Tensor::zeros(&[4, 8, 8]), &words("a"))
        .map_err(e2s)?;

    let bytes = formats::encode_model(&m);
    ensure(formats::encode_model(&formats::decode_model(&bytes).map_err(e2s)?) == bytes, || ".mw".into())?;
    let bytes = formats::encode_encoder(&enc);
    ensure(formats::encode_encoder(&formats::decode_encoder(&bytes).map_err(e2s)?) == bytes, || ".enc".into())?;
    let bytes = formats::encode_tensor(&t);
    ensure(formats::encode_tensor(&formats::decode_tensor(&bytes).map_err(e2s)?) == bytes, || ".ten".into())?;
    let bytes = formats::encode_trajectory(&traj);
    ensure(
        formats::encode_trajectory(&formats::decode_trajectory(&bytes).map_err(e2s)?) == bytes,
        || ".traj".into(),
    )?;
    let ppm = encode_ppm(&toy_image(0, TOY_DATASET_SEED));
    ensure(encode_ppm(&decode_ppm(&ppm).map_err(e2s)?) == ppm, || ".ppm".into())?;
    let pgm = mask_to_pgm(&Tensor::full(&[64], 0.5), 8, 8).map_err(e2s)?;
    let (w, h, px) = decode_pgm(&pgm).map_err(e2s)?;
    ensure(atnj_core::image::encode_pgm(w, h, &px) == pgm, || ".pgm".into())?;
    Ok(".mw .enc .ten .traj .ppm .pgm".into())
}

pub fn run(golden_dir: &Path) -> Vec<Check> {
    let mut checks: Vec<Check> = golden::verify_all(golden_dir)
        .into_iter()
        .map(|g| Check {
            name: g.name,
            outcome: if g.passed { Ok(g.detail) } else { Err(g.detail) },
        })
        .collect();
    let suite: [Named; 18] = [
        ("schedule invariants", check_schedule),
        ("ddim single-step round trip", check_ddim_single_step),
        ("ddim full-chain round trip", check_ddim_full_chain),
        ("parameter count formula", check_param_count),
        ("forward determinism and tap", check_forward_determinism),
        ("processor indirection", check_processor_indirection),
        ("mask extraction range", check_mask_law),
        ("mask union is max", check_union),
        ("step gate", check_gate),
        ("scale linearity", check_linearity),
        ("identity proxy closed forms", check_identity_proxy),
        ("off-path equivalence", check_off_path),
        ("generate invariants", check_generate_invariants),
        ("encoder linearity", check_encoder),
        ("encoder training invariants", check_training),
        ("file format round trips", check_formats),
        ("toy dataset distinct", || {
            let ds = toy_dataset();
            let distinct = (0..ds.len()).all(|i| (i + 1..ds.len()).all(|j| ds[i] != ds[j]));
            ensure(distinct && ds.len() == 8, || "duplicate toy images".into())?;
            Ok("8 images".into())
        }),
        ("rng normal moments", || {
            let v = Rng::new(77).normals(100_000);
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / v.len() as f64;
            ensure(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02, || {
                format!("mean {mean}, var {var}")
            })?;
            Ok(format!("mean {mean:.4}, var {var:.4}"))
        }),
    ];
    checks.extend(suite.into_iter().map(|(name, f)| Check {
        name,
        outcome: f(),
    }));
    checks
}
