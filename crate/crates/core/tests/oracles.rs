//! Injection operators against straightforward scalar loops.

use atnj_core::injector::{
    cross_attention_inject, extract_mask, masked_self_attention, union_masks, ConceptFeatures,
    ConceptMask, InjectionConfig, ScaleScope,
};
use atnj_core::pipeline::{identity_proxy, PROXY_EPS};
use atnj_core::rng::Rng;
use atnj_core::unet::AttentionWeights;
use atnj_core::Tensor;
use proptest::prelude::*;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, c) = t.dims2().unwrap();
    (0..r)
        .map(|i| (0..c).map(|j| f64::from(t.data()[i * c + j])).collect())
        .collect()
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                out[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    out
}

/// Scaled-dot-product attention where column `j`'s probability is multiplied by `col[j]`.
fn weighted_attention(q: &Mat, k: &Mat, v: &Mat, col: &[f64]) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qi| {
            let scores: Vec<f64> = k
                .iter()
                .map(|kj| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            let mut row = vec![0.0; v[0].len()];
            for (j, s) in scores.iter().enumerate() {
                let p = (s - max).exp() / z * col[j];
                for (r, vj) in row.iter_mut().zip(&v[j]) {
                    *r += p * vj;
                }
            }
            row
        })
        .collect()
}

fn rand2(rng: &mut Rng, r: usize, c: usize) -> Tensor {
    rng.normal_tensor(r * c).reshape(&[r, c]).unwrap()
}

fn uniform(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::from_vec((0..n).map(|_| rng.next_uniform() as f32).collect())
}

fn weights(rng: &mut Rng, d: usize) -> AttentionWeights {
    let mut w = || rand2(rng, d, d).scale(0.5);
    AttentionWeights {
        q: w(),
        k: w(),
        v: w(),
        o: w(),
    }
}

fn max_err(a: &Tensor, b: &Mat) -> f64 {
    let c = b[0].len();
    a.data()
        .iter()
        .enumerate()
        .map(|(i, &x)| (f64::from(x) - b[i / c][i % c]).abs())
        .fold(0.0, f64::max)
}

fn frozen(m_g: Tensor, m_r: Tensor) -> ConceptMask {
    ConceptMask {
        m_g,
        m_r,
        frozen: true,
        freeze_step: Some(2),
        ..ConceptMask::empty(1)
    }
}

#[test]
fn masked_self_attention_matches_scalar_loops() {
    let mut rng = Rng::new(101);
    for case in 0..10 {
        let (n, d) = (3 + case % 5, 4 + 2 * (case % 3));
        let w = weights(&mut rng, d);
        let f_gen = rand2(&mut rng, n, d);
        let f_ref = rand2(&mut rng, n, d);
        let (m_g, m_r) = (uniform(&mut rng, n), uniform(&mut rng, n));
        let w_s = 0.25 + 2.0 * rng.next_uniform() as f32;
        for scope in [ScaleScope::All, ScaleScope::InjectedOnly] {
            let cfg = InjectionConfig {
                w_s,
                scale_scope: scope,
                ..InjectionConfig::default()
            };
            let got = masked_self_attention(
                &f_gen,
                &f_ref,
                &w,
                &frozen(m_g.clone(), m_r.clone()),
                &cfg,
                3,
            )
            .unwrap();

            let (fg, fr) = (to_mat(&f_gen), to_mat(&f_ref));
            let q = mul(&fg, &to_mat(&w.q));
            let mut k = mul(&fg, &to_mat(&w.k));
            k.extend(mul(&fr, &to_mat(&w.k)));
            let mut v = mul(&fg, &to_mat(&w.v));
            v.extend(mul(&fr, &to_mat(&w.v)));
            let gen_scale = if scope == ScaleScope::All {
                f64::from(w_s)
            } else {
                1.0
            };
            let col: Vec<f64> = m_g
                .data()
                .iter()
                .map(|&m| (1.0 - f64::from(m)) * gen_scale)
                .chain(m_r.data().iter().map(|&m| f64::from(m) * f64::from(w_s)))
                .collect();
            let want = weighted_attention(&q, &k, &v, &col);
            let err = max_err(&got, &want);
            assert!(err <= 1e-6, "case {case} {scope}: {err:e}");
        }
    }
}

#[test]
fn cross_injection_matches_scalar_loops() {
    let mut rng = Rng::new(202);
    for case in 0..10 {
        let (n, d, n_txt, n_c) = (4 + case % 4, 4 + 2 * (case % 2), 2 + case % 3, 1 + case % 5);
        let w = weights(&mut rng, d);
        let f_gen = rand2(&mut rng, n, d);
        let prompt = rand2(&mut rng, n_txt, d);
        let concept = rand2(&mut rng, n_c, d);
        let w_c = 0.25 + 2.0 * rng.next_uniform() as f32;
        for scope in [ScaleScope::All, ScaleScope::InjectedOnly] {
            let cfg = InjectionConfig {
                w_c,
                scale_scope: scope,
                ..InjectionConfig::default()
            };
            let got = cross_attention_inject(
                &f_gen,
                &prompt,
                &ConceptFeatures::new(concept.clone()),
                &w,
                &cfg,
                3,
            )
            .unwrap();

            let mut ctx = to_mat(&prompt);
            ctx.extend(to_mat(&concept));
            let q = mul(&to_mat(&f_gen), &to_mat(&w.q));
            let k = mul(&ctx, &to_mat(&w.k));
            let v = mul(&ctx, &to_mat(&w.v));
            let col: Vec<f64> = (0..n_txt + n_c)
                .map(|j| {
                    if scope == ScaleScope::InjectedOnly && j < n_txt {
                        1.0
                    } else {
                        f64::from(w_c)
                    }
                })
                .collect();
            let err = max_err(&got.out, &weighted_attention(&q, &k, &v, &col));
            assert!(err <= 1e-6, "case {case} {scope}: {err:e}");
            let ones = vec![1.0; n_txt + n_c];
            let probs = weighted_attention(&q, &k, &mul_identity(n_txt + n_c), &ones);
            assert!(max_err(&got.probs, &probs) <= 1e-6);
        }
    }
}

fn mul_identity(n: usize) -> Mat {
    (0..n)
        .map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect())
        .collect()
}

#[test]
fn identity_proxy_matches_direct_sum() {
    let mut rng = Rng::new(303);
    for _ in 0..10 {
        let z = rng.normal_tensor(4 * 64);
        let x = rng.normal_tensor(4 * 64);
        let m = uniform(&mut rng, 64);
        let (mut num, mut den) = (0.0, 0.0);
        for c in 0..4 {
            for p in 0..64 {
                let (a, b) = (f64::from(z.data()[c * 64 + p]), f64::from(x.data()[c * 64 + p]));
                let w = f64::from(m.data()[p]);
                num += w * (a - b) * (a - b);
                den += w * (a * a + b * b + PROXY_EPS);
            }
        }
        let want = 1.0 - num / (2.0 * den);
        assert!((identity_proxy(&z, &x, &m).unwrap() - want).abs() <= 1e-6);
    }
}

#[test]
fn identity_proxy_closed_forms() {
    let mut rng = Rng::new(304);
    let x = rng.normal_tensor(256);
    let m = uniform(&mut rng, 64);
    assert!((identity_proxy(&x, &x, &m).unwrap() - 1.0).abs() < 1e-12);
    assert!(identity_proxy(&x.scale(-1.0), &x, &m).unwrap().abs() < 1e-7);
    assert!(identity_proxy(&x, &Tensor::zeros(&[3]), &m).is_err());
}

fn grid_masks() -> Vec<Tensor> {
    let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut out = Vec::with_capacity(625);
    for i in 0..625usize {
        let v: Vec<f32> = (0..4).map(|p| grid[(i / 5usize.pow(p)) % 5]).collect();
        out.push(Tensor::from_vec(v));
    }
    out
}

#[test]
fn union_is_elementwise_max_on_grid() {
    let masks = grid_masks();
    for a in &masks {
        for b in &masks {
            let u = union_masks(&[a.clone(), b.clone()]).unwrap();
            for i in 0..4 {
                assert_eq!(u.data()[i], a.data()[i].max(b.data()[i]));
            }
        }
    }
}

proptest! {
    #[test]
    fn extracted_mask_spans_unit_interval(seed in any::<u64>(), n in 2usize..80) {
        let mut rng = Rng::new(seed);
        let a = uniform(&mut rng, n);
        prop_assume!(a.data().iter().any(|&v| v != a.data()[0]));
        let m = extract_mask(&a);
        prop_assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(m.data().contains(&0.0));
        prop_assert!(m.data().contains(&1.0));
    }

    #[test]
    fn extracted_mask_preserves_order(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let a = uniform(&mut rng, 16);
        let m = extract_mask(&a);
        for i in 0..16 {
            for j in 0..16 {
                if a.data()[i] < a.data()[j] {
                    prop_assert!(m.data()[i] <= m.data()[j]);
                }
            }
        }
    }
}

#[test]
fn constant_map_gives_zero_mask() {
    let m = extract_mask(&Tensor::full(&[64], 0.3));
    assert!(m.data().iter().all(|&v| v == 0.0));
}
