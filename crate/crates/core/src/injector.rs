//! Attention injection for the generating UNet.
//!
//! Two mechanisms share one [`InjectionProcessor`]:
//!
//! * masked self-attention injection: the reference pass's keys/values are
//!   appended to the generator's own, and the attention matrix is weighted per
//!   key column by `1 − M_G` (generator keys) and `M_R` (reference keys), then
//!   scaled by `W_S`;
//! * cross-attention detail injection: concept-encoder tokens are appended to
//!   the prompt tokens before the key/value projections, and the attention
//!   matrix is scaled by `W_C`.
//!
//! Both are off for the first `k` denoise steps, which instead collect the
//! cross-attention maps of the coarse concept word into a [`ConceptMask`].
//! Masked rows are never renormalized.

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::math::{concat, matmul, minmax_normalize, sigmoid};
use crate::tensor::Tensor;
use crate::unet::{
    attention_probs, vanilla_cross_attention, vanilla_self_attention, AttentionProcessor,
    AttentionTap, AttentionWeights, CrossAttentionOutput, SelfAttentionOutput,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScaleScope {
    /// Scale the whole attention matrix.
    #[default]
    All,
    /// Scale only the injected (reference or concept) key columns.
    InjectedOnly,
}

impl std::str::FromStr for ScaleScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ScaleScope::All),
            "injected-only" | "injected_only" => Ok(ScaleScope::InjectedOnly),
            other => Err(Error::InvalidConfig(format!("unknown scale scope {other:?}"))),
        }
    }
}

impl std::fmt::Display for ScaleScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScaleScope::All => "all",
            ScaleScope::InjectedOnly => "injected-only",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionConfig {
    pub w_s: f32,
    pub w_c: f32,
    /// Number of leading denoise steps used only to build the mask.
    pub k: usize,
    pub total_steps: usize,
    pub coarse_token_gen: usize,
    pub coarse_token_ref: usize,
    pub scale_scope: ScaleScope,
    pub enable_self_inject: bool,
    pub enable_cross_inject: bool,
    pub enable_mask: bool,
}

impl Default for InjectionConfig {
    fn default() -> Self {
        Self {
            w_s: 1.0,
            w_c: 1.0,
            k: 2,
            total_steps: 50,
            coarse_token_gen: 0,
            coarse_token_ref: 0,
            scale_scope: ScaleScope::All,
            enable_self_inject: true,
            enable_cross_inject: true,
            enable_mask: true,
        }
    }
}

impl InjectionConfig {
    pub fn validate(&self, gen_prompt_len: usize, ref_prompt_len: usize) -> Result<()> {
        if !(self.w_s > 0.0 && self.w_s.is_finite() && self.w_c > 0.0 && self.w_c.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "W_S and W_C must be positive, got {} and {}",
                self.w_s, self.w_c
            )));
        }
        if self.k == 0 || self.k > self.total_steps {
            return Err(Error::InvalidConfig(format!(
                "need 0 < k <= T, got k={} T={}",
                self.k, self.total_steps
            )));
        }
        if self.coarse_token_gen >= gen_prompt_len {
            return Err(Error::TokenOutOfRange {
                index: self.coarse_token_gen,
                len: gen_prompt_len,
            });
        }
        if self.coarse_token_ref >= ref_prompt_len {
            return Err(Error::TokenOutOfRange {
                index: self.coarse_token_ref,
                len: ref_prompt_len,
            });
        }
        Ok(())
    }
}

/// Whether injection runs at denoise step `step` (1 = noisiest).
///
/// Step `s` corresponds to the descending index `t = T − s + 1`, so this is the
/// `t ≤ T − k` condition: the first `k` steps only initialize the mask.
pub fn step_gate(step: usize, cfg: &InjectionConfig) -> bool {
    step > cfg.k
}

/// `normalize(sigmoid(normalize(A) − 0.5))`.
pub fn extract_mask(attn: &Tensor) -> Tensor {
    let n = minmax_normalize(attn);
    minmax_normalize(&sigmoid(&n.map(|v| v - 0.5)))
}

/// Soft union: elementwise maximum.
pub fn union_masks(masks: &[Tensor]) -> Result<Tensor> {
    let (first, rest) = masks.split_first().ok_or(Error::EmptyList)?;
    rest.iter()
        .try_fold(first.clone(), |acc, m| acc.zip_with(m, f32::max))
}

/// Mean over layers of the `token` column of each cross-attention map.
pub fn coarse_attention(tap: &AttentionTap, token: usize) -> Result<Tensor> {
    let first = tap
        .cross_maps
        .first()
        .ok_or_else(|| Error::shape("tap holds no cross-attention maps"))?;
    let (rows, _) = first.dims2()?;
    let mut acc = vec![0.0f64; rows];
    for map in &tap.cross_maps {
        let (r, c) = map.dims2()?;
        if r != rows {
            return Err(Error::shape("cross-attention maps differ in rows"));
        }
        if token >= c {
            return Err(Error::TokenOutOfRange { index: token, len: c });
        }
        for (i, a) in acc.iter_mut().enumerate() {
            *a += f64::from(map.data()[i * c + token]);
        }
    }
    let layers = tap.cross_maps.len() as f64;
    Ok(Tensor::from_vec(
        acc.into_iter().map(|v| (v / layers) as f32).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptMask {
    pub m_g: Tensor,
    pub m_r: Tensor,
    /// Per-step `(A_G, A_R)` coarse-token maps.
    pub raw_maps: Vec<(Tensor, Tensor)>,
    /// Per-step `(M_G, M_R)` before the union.
    pub step_masks: Vec<(Tensor, Tensor)>,
    pub frozen: bool,
    pub freeze_step: Option<usize>,
}

impl ConceptMask {
    pub fn empty(tokens: usize) -> Self {
        Self {
            m_g: Tensor::zeros(&[tokens]),
            m_r: Tensor::zeros(&[tokens]),
            raw_maps: Vec::new(),
            step_masks: Vec::new(),
            frozen: false,
            freeze_step: None,
        }
    }

    /// `M_G ≡ 0`, `M_R ≡ 1`: masking becomes a no-op.
    pub fn transparent(tokens: usize) -> Self {
        Self {
            m_g: Tensor::zeros(&[tokens]),
            m_r: Tensor::full(&[tokens], 1.0),
            raw_maps: Vec::new(),
            step_masks: Vec::new(),
            frozen: true,
            freeze_step: None,
        }
    }

    /// Adds the masks of step `step ≤ k`; the union is taken and frozen at step `k`.
    pub fn accumulate_step(
        &mut self,
        tap_gen: &AttentionTap,
        tap_ref: &AttentionTap,
        cfg: &InjectionConfig,
        step: usize,
    ) -> Result<()> {
        if self.frozen || step > cfg.k {
            return Err(Error::AlreadyFrozen(step));
        }
        if step != self.step_masks.len() + 1 {
            return Err(Error::InvalidConfig(format!(
                "mask steps must arrive in order, expected {} got {step}",
                self.step_masks.len() + 1
            )));
        }
        let a_g = coarse_attention(tap_gen, cfg.coarse_token_gen)?;
        let a_r = coarse_attention(tap_ref, cfg.coarse_token_ref)?;
        let (m_g, m_r) = (extract_mask(&a_g), extract_mask(&a_r));
        self.raw_maps.push((a_g, a_r));
        self.step_masks.push((m_g, m_r));
        if step == cfg.k {
            let (gs, rs): (Vec<_>, Vec<_>) = self.step_masks.iter().cloned().unzip();
            self.m_g = union_masks(&gs)?;
            self.m_r = union_masks(&rs)?;
            self.frozen = true;
            self.freeze_step = Some(step);
        }
        Ok(())
    }

    pub fn digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.m_g.to_le_bytes());
        h.update(self.m_r.to_le_bytes());
        h.update([u8::from(self.frozen)]);
        h.finalize().into()
    }
}

/// Concept-encoder output appended to the prompt in cross-attention.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConceptFeatures {
    /// `N_c × d`; `None` when there are no concept tokens.
    pub tokens: Option<Tensor>,
}

impl ConceptFeatures {
    pub fn new(tokens: Tensor) -> Self {
        Self {
            tokens: Some(tokens),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.as_ref().map_or(0, |t| t.shape()[0])
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// The masked, scaled `N × 2N` attention matrix over `[gen keys | ref keys]`.
pub fn masked_attention_probs(
    q: &Tensor,
    k_gen: &Tensor,
    k_ref: &Tensor,
    m_g: &Tensor,
    m_r: &Tensor,
    w_s: f32,
    scope: ScaleScope,
) -> Result<Tensor> {
    let (n_gen, _) = k_gen.dims2()?;
    let (n_ref, _) = k_ref.dims2()?;
    if m_g.len() != n_gen || m_r.len() != n_ref {
        return Err(Error::shape(format!(
            "masks of length {}/{} for {n_gen}/{n_ref} keys",
            m_g.len(),
            m_r.len()
        )));
    }
    let keys = concat(k_gen, k_ref, 0)?;
    let probs = attention_probs(q, &keys)?;
    let w_s = f64::from(w_s);
    let gen_scale = match scope {
        ScaleScope::All => w_s,
        ScaleScope::InjectedOnly => 1.0,
    };
    let weights: Vec<f32> = m_g
        .data()
        .iter()
        .map(|&m| ((1.0 - f64::from(m)) * gen_scale) as f32)
        .chain(m_r.data().iter().map(|&m| (f64::from(m) * w_s) as f32))
        .collect();
    probs.scale_columns(&weights)
}

/// Masked attention from precomputed projections; returns `P · [V_gen; V_ref]`.
#[allow(clippy::too_many_arguments)]
pub fn masked_attention(
    q: &Tensor,
    k_gen: &Tensor,
    v_gen: &Tensor,
    k_ref: &Tensor,
    v_ref: &Tensor,
    m_g: &Tensor,
    m_r: &Tensor,
    w_s: f32,
    scope: ScaleScope,
) -> Result<Tensor> {
    let probs = masked_attention_probs(q, k_gen, k_ref, m_g, m_r, w_s, scope)?;
    matmul(&probs, &concat(v_gen, v_ref, 0)?)
}

fn effective_masks<'m>(
    mask: &'m ConceptMask,
    cfg: &InjectionConfig,
    step: usize,
    transparent: &'m ConceptMask,
) -> Result<&'m ConceptMask> {
    if !cfg.enable_mask {
        return Ok(transparent);
    }
    if !mask.frozen {
        return Err(Error::MaskNotReady(step));
    }
    Ok(mask)
}

/// Masked self-attention injection on feature inputs (before `W^O`).
pub fn masked_self_attention(
    f_gen: &Tensor,
    f_ref: &Tensor,
    weights: &AttentionWeights,
    mask: &ConceptMask,
    cfg: &InjectionConfig,
    step: usize,
) -> Result<Tensor> {
    if !(cfg.enable_self_inject && step_gate(step, cfg)) {
        return Ok(vanilla_self_attention(f_gen, weights)?.out);
    }
    if f_gen.shape() != f_ref.shape() {
        return Err(Error::shape(format!(
            "gen features {:?} vs ref features {:?}",
            f_gen.shape(),
            f_ref.shape()
        )));
    }
    let q = matmul(f_gen, &weights.q)?;
    let (k_gen, v_gen) = (matmul(f_gen, &weights.k)?, matmul(f_gen, &weights.v)?);
    let (k_ref, v_ref) = (matmul(f_ref, &weights.k)?, matmul(f_ref, &weights.v)?);
    let transparent = ConceptMask::transparent(k_ref.dims2()?.0);
    let m = effective_masks(mask, cfg, step, &transparent)?;
    masked_attention(
        &q, &k_gen, &v_gen, &k_ref, &v_ref, &m.m_g, &m.m_r, cfg.w_s, cfg.scale_scope,
    )
}

/// Cross-attention with concept tokens appended to the prompt context.
///
/// `probs` in the result is the unscaled softmax over `[prompt | concept]`.
pub fn cross_attention_inject(
    f_gen: &Tensor,
    f_prompt: &Tensor,
    concept: &ConceptFeatures,
    weights: &AttentionWeights,
    cfg: &InjectionConfig,
    step: usize,
) -> Result<CrossAttentionOutput> {
    if !(cfg.enable_cross_inject && step_gate(step, cfg)) {
        return vanilla_cross_attention(f_gen, f_prompt, weights);
    }
    let context = match &concept.tokens {
        Some(c) => concat(f_prompt, c, 0)?,
        None => f_prompt.clone(),
    };
    let q = matmul(f_gen, &weights.q)?;
    let k = matmul(&context, &weights.k)?;
    let v = matmul(&context, &weights.v)?;
    let probs = attention_probs(&q, &k)?;
    let n_prompt = f_prompt.dims2()?.0;
    let scale = match cfg.scale_scope {
        ScaleScope::All => vec![cfg.w_c; n_prompt + concept.len()],
        ScaleScope::InjectedOnly => {
            let mut s = vec![1.0; n_prompt];
            s.resize(n_prompt + concept.len(), cfg.w_c);
            s
        }
    };
    let out = matmul(&probs.scale_columns(&scale)?, &v)?;
    Ok(CrossAttentionOutput { out, probs })
}

/// Processor installed on the generating UNet for one denoise step.
pub struct InjectionProcessor<'a> {
    pub cfg: &'a InjectionConfig,
    pub step: usize,
    /// Reference pass tap at the same schedule index.
    pub reference: Option<&'a AttentionTap>,
    pub concept: &'a ConceptFeatures,
    pub mask: &'a ConceptMask,
}

impl AttentionProcessor for InjectionProcessor<'_> {
    fn self_attention(
        &mut self,
        layer: usize,
        hidden: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<SelfAttentionOutput> {
        if !(self.cfg.enable_self_inject && step_gate(self.step, self.cfg)) {
            return vanilla_self_attention(hidden, weights);
        }
        let reference = self
            .reference
            .and_then(|r| r.self_attn.get(layer))
            .ok_or_else(|| Error::shape(format!("no reference features for layer {layer}")))?;
        let q = matmul(hidden, &weights.q)?;
        let key = matmul(hidden, &weights.k)?;
        let value = matmul(hidden, &weights.v)?;
        let transparent = ConceptMask::transparent(reference.key.dims2()?.0);
        let m = effective_masks(self.mask, self.cfg, self.step, &transparent)?;
        let out = masked_attention(
            &q,
            &key,
            &value,
            &reference.key,
            &reference.value,
            &m.m_g,
            &m.m_r,
            self.cfg.w_s,
            self.cfg.scale_scope,
        )?;
        Ok(SelfAttentionOutput { out, key, value })
    }

    fn cross_attention(
        &mut self,
        _layer: usize,
        hidden: &Tensor,
        context: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<CrossAttentionOutput> {
        cross_attention_inject(hidden, context, self.concept, weights, self.cfg, self.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::unet::{embed_prompt, ModelConfig, ModelWeights, VanillaProcessor};

    fn rand2(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        rng.normal_tensor(r * c).reshape(&[r, c]).unwrap()
    }

    fn attn_weights(rng: &mut Rng, d: usize) -> AttentionWeights {
        AttentionWeights {
            q: rand2(rng, d, d).scale(0.5),
            k: rand2(rng, d, d).scale(0.5),
            v: rand2(rng, d, d).scale(0.5),
            o: rand2(rng, d, d).scale(0.5),
        }
    }

    fn active_cfg() -> InjectionConfig {
        InjectionConfig {
            k: 2,
            total_steps: 50,
            ..Default::default()
        }
    }

    fn frozen_mask(m_g: Vec<f32>, m_r: Vec<f32>) -> ConceptMask {
        ConceptMask {
            m_g: Tensor::from_vec(m_g),
            m_r: Tensor::from_vec(m_r),
            raw_maps: vec![],
            step_masks: vec![],
            frozen: true,
            freeze_step: Some(2),
        }
    }

    #[test]
    fn extract_mask_example() {
        let m = extract_mask(&Tensor::from_vec(vec![0.0, 1.0, 0.5, 0.25]));
        assert_eq!(m.data()[0], 0.0);
        assert_eq!(m.data()[1], 1.0);
        assert!((m.data()[2] - 0.5).abs() < 1e-6);
        assert!((m.data()[3] - 0.246_134_08).abs() < 1e-6);
    }

    #[test]
    fn extract_mask_constant_is_zero() {
        let m = extract_mask(&Tensor::full(&[64], 0.3));
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn union_examples() {
        let a = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(union_masks(std::slice::from_ref(&a)).unwrap(), a);
        let u = union_masks(&[a, Tensor::from_vec(vec![1.0, 0.0])]).unwrap();
        assert_eq!(u.data(), &[1.0, 1.0]);
        let u = union_masks(&[
            Tensor::from_vec(vec![0.2, 0.7]),
            Tensor::from_vec(vec![0.4, 0.3]),
        ])
        .unwrap();
        assert_eq!(u.data(), &[0.4, 0.7]);
        assert!(matches!(union_masks(&[]), Err(Error::EmptyList)));
        assert!(matches!(
            union_masks(&[Tensor::zeros(&[2]), Tensor::zeros(&[3])]),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gate_boundaries() {
        let cfg = active_cfg();
        assert!(!step_gate(1, &cfg));
        assert!(!step_gate(2, &cfg));
        assert!(step_gate(3, &cfg));
    }

    #[test]
    fn annihilating_masks_give_zero() {
        let mut rng = Rng::new(1);
        let (fg, fr) = (rand2(&mut rng, 64, 8), rand2(&mut rng, 64, 8));
        let w = attn_weights(&mut rng, 8);
        let mask = frozen_mask(vec![1.0; 64], vec![0.0; 64]);
        let out = masked_self_attention(&fg, &fr, &w, &mask, &active_cfg(), 3).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn transparent_masks_equal_concatenated_attention() {
        let mut rng = Rng::new(2);
        let (fg, fr) = (rand2(&mut rng, 64, 8), rand2(&mut rng, 64, 8));
        let w = attn_weights(&mut rng, 8);
        let mask = ConceptMask::transparent(64);
        let out = masked_self_attention(&fg, &fr, &w, &mask, &active_cfg(), 10).unwrap();
        let f = concat(&fg, &fr, 0).unwrap();
        let q = matmul(&fg, &w.q).unwrap();
        let k = matmul(&f, &w.k).unwrap();
        let v = matmul(&f, &w.v).unwrap();
        let plain = matmul(&attention_probs(&q, &k).unwrap(), &v).unwrap();
        assert!(out.max_abs_diff(&plain).unwrap() <= 1e-6);
    }

    #[test]
    fn inactive_step_is_vanilla() {
        let mut rng = Rng::new(3);
        let (fg, fr) = (rand2(&mut rng, 64, 8), rand2(&mut rng, 64, 8));
        let w = attn_weights(&mut rng, 8);
        let out = masked_self_attention(&fg, &fr, &w, &ConceptMask::empty(64), &active_cfg(), 2)
            .unwrap();
        assert_eq!(out, vanilla_self_attention(&fg, &w).unwrap().out);
    }

    #[test]
    fn unfrozen_mask_is_rejected_when_active() {
        let mut rng = Rng::new(4);
        let (fg, fr) = (rand2(&mut rng, 64, 8), rand2(&mut rng, 64, 8));
        let w = attn_weights(&mut rng, 8);
        let r = masked_self_attention(&fg, &fr, &w, &ConceptMask::empty(64), &active_cfg(), 3);
        assert!(matches!(r, Err(Error::MaskNotReady(3))));
    }

    #[test]
    fn cross_inject_degenerate_cases() {
        let mut rng = Rng::new(5);
        let fg = rand2(&mut rng, 64, 8);
        let fp = rand2(&mut rng, 3, 8);
        let w = attn_weights(&mut rng, 8);
        let vanilla = vanilla_cross_attention(&fg, &fp, &w).unwrap();
        let cfg = active_cfg();
        let empty = cross_attention_inject(&fg, &fp, &ConceptFeatures::default(), &w, &cfg, 10)
            .unwrap();
        assert_eq!(empty.out, vanilla.out);
        let concept = ConceptFeatures::new(rand2(&mut rng, 5, 8));
        let inactive = cross_attention_inject(&fg, &fp, &concept, &w, &cfg, 1).unwrap();
        assert_eq!(inactive.out, vanilla.out);
        let active = cross_attention_inject(&fg, &fp, &concept, &w, &cfg, 10).unwrap();
        assert_eq!(active.probs.shape(), &[64, 8]);
    }

    #[test]
    fn doubling_scales_doubles_output() {
        let mut rng = Rng::new(6);
        let fg = rand2(&mut rng, 64, 8);
        let fr = rand2(&mut rng, 64, 8);
        let fp = rand2(&mut rng, 3, 8);
        let w = attn_weights(&mut rng, 8);
        let concept = ConceptFeatures::new(rand2(&mut rng, 4, 8));
        let mask = frozen_mask(
            (0..64).map(|i| (i as f32) / 63.0).collect(),
            (0..64).map(|i| 1.0 - (i as f32) / 63.0).collect(),
        );
        let one = active_cfg();
        let two = InjectionConfig {
            w_s: 2.0,
            w_c: 2.0,
            ..active_cfg()
        };
        let a = masked_self_attention(&fg, &fr, &w, &mask, &one, 5).unwrap();
        let b = masked_self_attention(&fg, &fr, &w, &mask, &two, 5).unwrap();
        assert!(b.max_abs_diff(&a.scale(2.0)).unwrap() <= 1e-6);
        let a = cross_attention_inject(&fg, &fp, &concept, &w, &one, 5).unwrap();
        let b = cross_attention_inject(&fg, &fp, &concept, &w, &two, 5).unwrap();
        assert!(b.out.max_abs_diff(&a.out.scale(2.0)).unwrap() <= 1e-6);
    }

    #[test]
    fn injected_only_leaves_gen_block_unscaled() {
        let mut rng = Rng::new(7);
        let q = rand2(&mut rng, 4, 2);
        let kg = rand2(&mut rng, 4, 2);
        let kr = rand2(&mut rng, 4, 2);
        let mg = Tensor::full(&[4], 0.25);
        let mr = Tensor::full(&[4], 0.5);
        let all = masked_attention_probs(&q, &kg, &kr, &mg, &mr, 3.0, ScaleScope::All).unwrap();
        let inj =
            masked_attention_probs(&q, &kg, &kr, &mg, &mr, 3.0, ScaleScope::InjectedOnly).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert!((all.data()[i * 8 + j] - 3.0 * inj.data()[i * 8 + j]).abs() < 1e-6);
                assert_eq!(all.data()[i * 8 + 4 + j], inj.data()[i * 8 + 4 + j]);
            }
        }
    }

    fn taps() -> (AttentionTap, AttentionTap, InjectionConfig) {
        let cfg = ModelConfig::default();
        let w = ModelWeights::init(cfg, 8).unwrap();
        let pg = embed_prompt(&["a", "woman", "on", "beach"], &cfg).unwrap();
        let pr = embed_prompt(&["a", "woman"], &cfg).unwrap();
        let x = Rng::new(9).normal_tensor(256).reshape(&[4, 8, 8]).unwrap();
        let (_, tg) = w.forward(&x, 981, &pg, &mut VanillaProcessor).unwrap();
        let (_, tr) = w.forward(&x, 961, &pr, &mut VanillaProcessor).unwrap();
        let icfg = InjectionConfig {
            coarse_token_gen: 1,
            coarse_token_ref: 1,
            ..Default::default()
        };
        (tg, tr, icfg)
    }

    #[test]
    fn accumulate_k1_is_single_step_mask() {
        let (tg, tr, cfg) = taps();
        let cfg = InjectionConfig { k: 1, ..cfg };
        let mut mask = ConceptMask::empty(64);
        mask.accumulate_step(&tg, &tr, &cfg, 1).unwrap();
        assert!(mask.frozen);
        assert_eq!(mask.freeze_step, Some(1));
        assert_eq!(mask.m_g, extract_mask(&coarse_attention(&tg, 1).unwrap()));
        assert_eq!(mask.m_r, extract_mask(&coarse_attention(&tr, 1).unwrap()));
    }

    #[test]
    fn accumulate_k2_unions_and_freezes() {
        let (tg, tr, cfg) = taps();
        let mut mask = ConceptMask::empty(64);
        mask.accumulate_step(&tg, &tr, &cfg, 1).unwrap();
        assert!(!mask.frozen);
        mask.accumulate_step(&tr, &tg, &cfg, 2).unwrap();
        assert!(mask.frozen);
        let (g1, g2) = (&mask.step_masks[0].0, &mask.step_masks[1].0);
        let want = g1.zip_with(g2, f32::max).unwrap();
        assert_eq!(mask.m_g, want);
        assert!(matches!(
            mask.accumulate_step(&tg, &tr, &cfg, 3),
            Err(Error::AlreadyFrozen(3))
        ));
    }
}
