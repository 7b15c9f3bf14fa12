use atnj_core::image::{toy_image, ReferenceImage, TOY_DATASET_SEED};
use atnj_core::injector::InjectionConfig;
use atnj_core::math::{layer_norm, linear, matmul, relu, softmax_rows};
use atnj_core::pipeline::{Engine, GenerationRequest, ReferenceInput, SweepAxis};
use atnj_core::rng::Rng;
use atnj_core::scheduler::{NoiseSchedule, ScheduleConfig};
use atnj_core::unet::{
    embed_prompt, latent_to_tokens, timestep_embedding, tokens_to_latent, ModelConfig,
    ModelWeights, PromptEmbedding, VanillaProcessor,
};
use atnj_core::{Error, Tensor};

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn engine() -> Engine {
    Engine::new(
        ModelWeights::init(ModelConfig::default(), 1).unwrap(),
        None,
        NoiseSchedule::new(ScheduleConfig::default()).unwrap(),
    )
}

fn request(seed: u64) -> GenerationRequest {
    let img = ReferenceImage::from_rgb8(&toy_image(2, TOY_DATASET_SEED)).unwrap();
    GenerationRequest {
        prompt_gen: words("a blob on grass"),
        prompt_ref: words("a blob"),
        reference: ReferenceInput::Image(img),
        concept_image: None,
        cfg: InjectionConfig {
            coarse_token_gen: 1,
            coarse_token_ref: 1,
            ..InjectionConfig::default()
        },
        seed,
        jobs: 1,
    }
}

/// The forward pass spelled out with no processor indirection.
fn plain_forward(w: &ModelWeights, x: &Tensor, t: usize, prompt: &PromptEmbedding) -> Tensor {
    let cfg = &w.config;
    let attend = |q: &Tensor, k: &Tensor, v: &Tensor| {
        let s = matmul(q, &k.transpose2().unwrap()).unwrap();
        let s = s.scale((1.0 / (cfg.d_model as f64).sqrt()) as f32);
        matmul(&softmax_rows(&s).unwrap(), v).unwrap()
    };
    let sin = Tensor::new(vec![1, cfg.d_model], timestep_embedding(t, cfg.d_model)).unwrap();
    let temb = linear(
        &relu(&linear(&sin, &w.time_w1, Some(&w.time_b1)).unwrap()),
        &w.time_w2,
        Some(&w.time_b2),
    )
    .unwrap();
    let tokens = latent_to_tokens(x, cfg).unwrap();
    let mut h = linear(&tokens, &w.in_proj_w, Some(&w.in_proj_b))
        .unwrap()
        .add_row(temb.data())
        .unwrap();
    for lw in &w.layers {
        let n = layer_norm(&h, &lw.ln1_scale, &lw.ln1_bias, cfg.layernorm_eps).unwrap();
        let a = &lw.self_attn;
        let (q, k, v) = (
            matmul(&n, &a.q).unwrap(),
            matmul(&n, &a.k).unwrap(),
            matmul(&n, &a.v).unwrap(),
        );
        h = h.add(&matmul(&attend(&q, &k, &v), &a.o).unwrap()).unwrap();

        let n = layer_norm(&h, &lw.ln2_scale, &lw.ln2_bias, cfg.layernorm_eps).unwrap();
        let a = &lw.cross_attn;
        let (q, k, v) = (
            matmul(&n, &a.q).unwrap(),
            matmul(&prompt.tokens, &a.k).unwrap(),
            matmul(&prompt.tokens, &a.v).unwrap(),
        );
        h = h.add(&matmul(&attend(&q, &k, &v), &a.o).unwrap()).unwrap();

        let n = layer_norm(&h, &lw.ln3_scale, &lw.ln3_bias, cfg.layernorm_eps).unwrap();
        let m = relu(&linear(&n, &lw.mlp_w1, Some(&lw.mlp_b1)).unwrap());
        h = h.add(&linear(&m, &lw.mlp_w2, Some(&lw.mlp_b2)).unwrap()).unwrap();
    }
    let out = linear(&h, &w.out_proj_w, Some(&w.out_proj_b)).unwrap();
    tokens_to_latent(&out, cfg).unwrap()
}

#[test]
fn processor_indirection_is_bit_exact() {
    let w = ModelWeights::init(ModelConfig::default(), 9).unwrap();
    let prompt = embed_prompt(&words("a photo of a dog"), &w.config).unwrap();
    let mut rng = Rng::new(4);
    for t in [1, 481, 981] {
        let x = rng.normal_tensor(256).reshape(&[4, 8, 8]).unwrap();
        let (eps, tap) = w.forward(&x, t, &prompt, &mut VanillaProcessor).unwrap();
        assert_eq!(eps, plain_forward(&w, &x, t, &prompt));
        assert_eq!(tap.self_attn.len(), 2);
        for map in &tap.cross_maps {
            assert_eq!(map.shape(), &[64, 5]);
            for row in map.data().chunks(5) {
                assert!((row.iter().map(|&v| f64::from(v)).sum::<f64>() - 1.0).abs() <= 1e-6);
            }
        }
    }
}

#[test]
fn disabled_injection_equals_vanilla_sampling() {
    let e = engine();
    for seed in [0, 17] {
        let mut req = request(seed);
        req.cfg.enable_self_inject = false;
        req.cfg.enable_cross_inject = false;
        let out = e.generate(&req).unwrap();
        let vanilla = e.sample_vanilla(&req.prompt_gen, seed).unwrap();
        assert_eq!(out.z0_gen.to_le_bytes(), vanilla.to_le_bytes());
    }
}

#[test]
fn default_run_freezes_mask_at_k_and_keeps_it() {
    let e = engine();
    let req = request(5);
    let traj = e.resolve_trajectory(&req).unwrap();
    let out = e.generate(&req).unwrap();
    assert_eq!(out.trajectory, traj);
    assert_eq!(out.mask.freeze_step, Some(2));
    assert_eq!(out.diagnostics.len(), 50);
    assert!(!out.diagnostics[0].mask_frozen);
    assert!(out.diagnostics[1..].iter().all(|d| d.mask_frozen));
    let frozen = out.mask_digests[1];
    assert!(out.mask_digests[1..].iter().all(|d| *d == frozen));
    assert!(out.z0_gen.is_finite());
    assert!((0.0..=1.0).contains(&out.identity_proxy));
}

#[test]
fn generation_is_deterministic_across_jobs() {
    let e = engine();
    let a = e.generate(&request(3)).unwrap();
    let b = e
        .generate(&GenerationRequest {
            jobs: 3,
            ..request(3)
        })
        .unwrap();
    assert_eq!(a.z0_gen, b.z0_gen);
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.diagnostics_csv(), b.diagnostics_csv());
}

#[test]
fn single_value_sweep_equals_generate() {
    let e = engine();
    let req = request(8);
    let rows = e.sweep(&req, SweepAxis::SelfScale, &[1.0], 1).unwrap();
    let direct = e.generate(&req).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].identity_proxy, direct.identity_proxy);
    assert_eq!(rows[0].latent_norm, direct.z0_gen.l2_norm());
}

#[test]
fn sweep_rows_are_ordered_and_parallel_safe() {
    let e = engine();
    let req = request(8);
    let values = [0.5, 1.0, 1.5];
    let serial = e.sweep(&req, SweepAxis::CrossScale, &values, 1).unwrap();
    let parallel = e.sweep(&req, SweepAxis::CrossScale, &values, 3).unwrap();
    assert_eq!(serial, parallel);
    assert_eq!(serial.iter().map(|r| r.value).collect::<Vec<_>>(), values);
    assert!(matches!(
        e.sweep(&req, SweepAxis::SelfScale, &[], 1),
        Err(Error::EmptySweep)
    ));
}

#[test]
fn mismatched_trajectory_is_rejected() {
    let e = engine();
    let mut req = request(1);
    let mut traj = e.resolve_trajectory(&req).unwrap();
    traj.latents.pop();
    traj.step_indices.pop();
    req.reference = ReferenceInput::Trajectory(traj);
    assert!(matches!(e.generate(&req), Err(Error::TrajectoryMismatch(_))));

    let mut req = request(1);
    req.cfg.total_steps = 20;
    req.cfg.k = 2;
    assert!(matches!(e.generate(&req), Err(Error::TrajectoryMismatch(_))));
}

#[test]
fn bad_coarse_token_is_rejected() {
    let mut req = request(1);
    req.cfg.coarse_token_gen = 4;
    assert!(matches!(
        engine().generate(&req),
        Err(Error::TokenOutOfRange { index: 4, len: 4 })
    ));
}
