//! Concept encoder, its noise-reconstruction loss, and a derivative-free trainer.
//!
//! The encoder splits a reference image into patches, projects them to the
//! model width, prepends a learned global token and runs a two-layer ReLU MLP
//! per token. Its output is appended to the prompt in the generator's
//! cross-attention. Training minimizes the usual noise-prediction MSE through
//! the frozen denoiser, using SPSA so no gradients are needed.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::{ReferenceImage, IMAGE_CHANNELS, IMAGE_SIZE};
use crate::injector::{ConceptFeatures, ConceptMask, InjectionConfig, InjectionProcessor};
use crate::math::{concat, linear, relu};
use crate::rng::Rng;
use crate::scheduler::NoiseSchedule;
use crate::tensor::Tensor;
use crate::unet::{embed_prompt, ModelWeights, PromptEmbedding, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub mlp_hidden: usize,
    pub train_patch_proj: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: IMAGE_SIZE,
            patch_size: 8,
            channels: IMAGE_CHANNELS,
            d_model: 32,
            mlp_hidden: 64,
            train_patch_proj: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0
            || !self.image_size.is_multiple_of(self.patch_size)
            || self.channels == 0
            || self.d_model == 0
            || self.mlp_hidden == 0
        {
            return Err(Error::InvalidConfig(format!("bad encoder config {self:?}")));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    /// Concept tokens produced per image: patches plus the global token.
    pub fn tokens(&self) -> usize {
        self.patches() + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub config: EncoderConfig,
    pub patch_proj_w: Tensor,
    pub patch_proj_b: Tensor,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
    pub global_token: Tensor,
}

fn encoder_shapes(cfg: &EncoderConfig) -> [Vec<usize>; 7] {
    let (p, d, h) = (cfg.patch_dim(), cfg.d_model, cfg.mlp_hidden);
    [
        vec![p, d],
        vec![d],
        vec![d, h],
        vec![h],
        vec![h, d],
        vec![d],
        vec![d],
    ]
}

impl EncoderWeights {
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = encoder_shapes(&config)
            .into_iter()
            .map(|shape| {
                let n = shape.iter().product();
                let data = rng
                    .normals(n)
                    .into_iter()
                    .map(|v| (v * f64::from(INIT_STD)) as f32)
                    .collect();
                Tensor::from_parts(shape, data)
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    pub fn from_tensors(config: EncoderConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = encoder_shapes(&config);
        if tensors.len() != shapes.len()
            || tensors
                .iter()
                .zip(&shapes)
                .any(|(t, s)| t.shape() != s.as_slice())
        {
            return Err(Error::shape("encoder tensors do not match config layout"));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        Ok(Self {
            config,
            patch_proj_w: next(),
            patch_proj_b: next(),
            mlp_w1: next(),
            mlp_b1: next(),
            mlp_w2: next(),
            mlp_b2: next(),
            global_token: next(),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.patch_proj_w,
            &self.patch_proj_b,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
            &self.global_token,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.patch_proj_w,
            &mut self.patch_proj_b,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
            &mut self.global_token,
        ]
    }

    fn trainable_mask(&self) -> [bool; 7] {
        let p = self.config.train_patch_proj;
        [p, p, true, true, true, true, true]
    }

    /// Trainable parameters flattened in serialization order.
    pub fn trainable_params(&self) -> Vec<f32> {
        self.tensors()
            .iter()
            .zip(self.trainable_mask())
            .filter(|(_, on)| *on)
            .flat_map(|(t, _)| t.data().iter().copied())
            .collect()
    }

    pub fn set_trainable_params(&mut self, params: &[f32]) -> Result<()> {
        let mask = self.trainable_mask();
        let expected: usize = self
            .tensors()
            .iter()
            .zip(mask)
            .filter(|(_, on)| *on)
            .map(|(t, _)| t.len())
            .sum();
        if params.len() != expected {
            return Err(Error::shape(format!(
                "{} trainable values for {expected} parameters",
                params.len()
            )));
        }
        let mut offset = 0;
        for (t, on) in self.tensors_mut().into_iter().zip(mask) {
            if on {
                let n = t.len();
                t.data_mut().copy_from_slice(&params[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }

    pub fn with_trainable_params(&self, params: &[f32]) -> Result<Self> {
        let mut w = self.clone();
        w.set_trainable_params(params)?;
        Ok(w)
    }
}

/// `patches × patch_dim`; patches row-major, each flattened channel-major then row-major.
pub fn patchify(image: &ReferenceImage, cfg: &EncoderConfig) -> Result<Tensor> {
    let (c, s, p) = (cfg.channels, cfg.image_size, cfg.patch_size);
    if image.pixels.shape() != [c, s, s] {
        return Err(Error::shape(format!(
            "image {:?} for encoder expecting [{c}, {s}, {s}]",
            image.pixels.shape()
        )));
    }
    let px = image.pixels.data();
    let grid = s / p;
    let mut out = Vec::with_capacity(cfg.patches() * cfg.patch_dim());
    for py in 0..grid {
        for pxi in 0..grid {
            for ch in 0..c {
                for y in 0..p {
                    let row = ch * s * s + (py * p + y) * s + pxi * p;
                    out.extend_from_slice(&px[row..row + p]);
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![cfg.patches(), cfg.patch_dim()], out))
}

/// Patch features with the global token prepended, before the MLP.
pub fn encode_tokens(image: &ReferenceImage, w: &EncoderWeights) -> Result<Tensor> {
    let patches = patchify(image, &w.config)?;
    let proj = linear(&patches, &w.patch_proj_w, Some(&w.patch_proj_b))?;
    let global = w.global_token.clone().reshape(&[1, w.config.d_model])?;
    concat(&global, &proj, 0)
}

pub fn encode_concept(image: &ReferenceImage, w: &EncoderWeights) -> Result<ConceptFeatures> {
    let tokens = encode_tokens(image, w)?;
    let h = relu(&linear(&tokens, &w.mlp_w1, Some(&w.mlp_b1))?);
    let f = linear(&h, &w.mlp_w2, Some(&w.mlp_b2))?;
    f.ensure_finite("concept features")?;
    Ok(ConceptFeatures::new(f))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSample {
    pub image: ReferenceImage,
    pub z0: Tensor,
    pub t: usize,
    pub eta: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub samples: Vec<TrainingSample>,
    pub prompt: PromptEmbedding,
}

/// Every dataset image once, each with a uniform timestep and fresh noise.
pub fn draw_batch(
    dataset: &[ReferenceImage],
    prompt: &PromptEmbedding,
    sched: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<TrainingBatch> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let samples = dataset
        .iter()
        .map(|image| {
            let z0 = image.to_latent();
            let t = rng.below(sched.alpha_bars.len());
            let eta = rng.normal_tensor(z0.len()).reshape(z0.shape())?;
            Ok(TrainingSample {
                image: image.clone(),
                z0,
                t,
                eta,
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrainingBatch {
        samples,
        prompt: prompt.clone(),
    })
}

/// `√ᾱ_t·z0 + √(1−ᾱ_t)·η`.
pub fn forward_diffuse(z0: &Tensor, eta: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    z0.zip_with(eta, |z, e| (a * f64::from(z) + b * f64::from(e)) as f32)
}

/// Sum of squared differences, accumulated in `f64`.
pub fn squared_error(target: &Tensor, pred: &Tensor) -> Result<f64> {
    if target.shape() != pred.shape() {
        return Err(Error::shape("loss target vs prediction"));
    }
    Ok(target
        .data()
        .iter()
        .zip(pred.data())
        .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
        .sum())
}

/// Injection settings used while training: cross-attention injection always on,
/// self-attention injection off.
fn training_injection(cfg: &InjectionConfig) -> InjectionConfig {
    InjectionConfig {
        enable_self_inject: false,
        enable_cross_inject: true,
        ..cfg.clone()
    }
}

/// Noise prediction of the frozen denoiser with `concept` injected in cross-attention.
pub fn predict_with_concept(
    model: &ModelWeights,
    z_t: &Tensor,
    t: usize,
    prompt: &PromptEmbedding,
    concept: &ConceptFeatures,
    cfg: &InjectionConfig,
) -> Result<Tensor> {
    let cfg = training_injection(cfg);
    let mask = ConceptMask::transparent(model.config.tokens());
    let mut proc = InjectionProcessor {
        cfg: &cfg,
        step: cfg.total_steps,
        reference: None,
        concept,
        mask: &mask,
    };
    Ok(model.forward(z_t, t, prompt, &mut proc)?.0)
}

/// Mean squared noise-prediction error over every element of the batch.
pub fn concept_loss(
    batch: &TrainingBatch,
    enc: &EncoderWeights,
    model: &ModelWeights,
    sched: &NoiseSchedule,
    cfg: &InjectionConfig,
) -> Result<f64> {
    let per_sample: Vec<(f64, usize)> = batch
        .samples
        .par_iter()
        .map(|s| {
            let z_t = forward_diffuse(&s.z0, &s.eta, s.t, sched)?;
            let concept = encode_concept(&s.image, enc)?;
            let pred = predict_with_concept(model, &z_t, s.t, &batch.prompt, &concept, cfg)?;
            Ok((squared_error(&s.eta, &pred)?, s.eta.len()))
        })
        .collect::<Result<_>>()?;
    let (sum, count) = per_sample
        .iter()
        .fold((0.0, 0usize), |(s, n), &(v, c)| (s + v, n + c));
    Ok(sum / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpsaConfig {
    pub a: f64,
    pub c: f64,
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        Self {
            a: 0.05,
            c: 0.01,
            alpha: 0.602,
            gamma: 0.101,
        }
    }
}

impl SpsaConfig {
    /// `(a_k, c_k)` for 0-based iteration `k`.
    pub fn gains(&self, k: usize) -> (f64, f64) {
        let k1 = (k + 1) as f64;
        (self.a / k1.powf(self.alpha), self.c / k1.powf(self.gamma))
    }
}

pub fn rademacher(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.rademacher()).collect()
}

fn perturbed(theta: &[f32], delta: &[f64], step: f64) -> Vec<f32> {
    theta
        .iter()
        .zip(delta)
        .map(|(&t, &d)| (f64::from(t) + step * d) as f32)
        .collect()
}

/// Two-sided simultaneous-perturbation gradient estimate.
///
/// Returns `(ĝ, L(θ + cΔ), L(θ − cΔ))` with `ĝ_i = (L⁺ − L⁻) / (2c·Δ_i)`.
pub fn spsa_gradient<F>(theta: &[f32], delta: &[f64], c: f64, loss: F) -> Result<(Vec<f64>, f64, f64)>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    let plus = perturbed(theta, delta, c);
    let minus = perturbed(theta, delta, -c);
    let (lp, lm) = rayon::join(|| loss(&plus), || loss(&minus));
    let (lp, lm) = (lp?, lm?);
    let scale = (lp - lm) / (2.0 * c);
    Ok((delta.iter().map(|d| scale / d).collect(), lp, lm))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub spsa: SpsaConfig,
    pub injection: InjectionConfig,
    pub prompt: Vec<String>,
    pub smoothing_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            spsa: SpsaConfig::default(),
            injection: InjectionConfig::default(),
            prompt: vec!["a".into(), "photo".into(), "of".into(), "blob".into()],
            smoothing_window: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub weights: EncoderWeights,
    /// Per iteration, the mean of the two perturbed losses.
    pub trace: Vec<f64>,
}

impl TrainOutcome {
    /// `(initial, final)` window means of the loss trace.
    pub fn smoothed(&self, window: usize) -> Option<(f64, f64)> {
        smoothed_endpoints(&self.trace, window)
    }
}

pub fn smoothed_endpoints(trace: &[f64], window: usize) -> Option<(f64, f64)> {
    if trace.is_empty() || window == 0 {
        return None;
    }
    let w = window.min(trace.len());
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&trace[..w]), mean(&trace[trace.len() - w..])))
}

/// Minimizes [`concept_loss`] with SPSA. Each iteration draws a fresh batch and
/// evaluates both perturbations on it.
#[allow(clippy::too_many_arguments)]
pub fn train_encoder(
    dataset: &[ReferenceImage],
    enc: &EncoderWeights,
    model: &ModelWeights,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    iters: usize,
    seed: u64,
    mut on_iter: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let prompt = embed_prompt(&cfg.prompt, &model.config)?;
    let mut rng = Rng::new(seed);
    let mut theta = enc.trainable_params();
    let mut trace = Vec::with_capacity(iters);
    for k in 0..iters {
        let batch = draw_batch(dataset, &prompt, sched, &mut rng)?;
        let delta = rademacher(&mut rng, theta.len());
        let (a_k, c_k) = cfg.spsa.gains(k);
        let loss = |p: &[f32]| {
            let w = enc.with_trainable_params(p)?;
            concept_loss(&batch, &w, model, sched, &cfg.injection)
        };
        let (grad, lp, lm) = spsa_gradient(&theta, &delta, c_k, loss)?;
        for (t, g) in theta.iter_mut().zip(&grad) {
            *t = (f64::from(*t) - a_k * g) as f32;
        }
        let l = 0.5 * (lp + lm);
        trace.push(l);
        on_iter(k, l);
    }
    Ok(TrainOutcome {
        weights: enc.with_trainable_params(&theta)?,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdTrial {
    pub indices: Vec<usize>,
    pub fd_gradient: Vec<f64>,
    pub spsa_gradient: Vec<f64>,
    pub inner_product: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub trials: Vec<FdTrial>,
}

impl FdReport {
    pub fn pass_rate(&self) -> f64 {
        let pass = self.trials.iter().filter(|t| t.inner_product > 0.0).count();
        pass as f64 / self.trials.len().max(1) as f64
    }
}

/// Central differences of `loss` at `theta` along each of `indices`.
pub fn central_differences<F>(theta: &[f32], indices: &[usize], h: f64, loss: &F) -> Result<Vec<f64>>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    if h == 0.0 {
        return Err(Error::InvalidStep);
    }
    indices
        .par_iter()
        .map(|&i| {
            let mut p = theta.to_vec();
            p[i] = (f64::from(theta[i]) + h) as f32;
            let up = loss(&p)?;
            p[i] = (f64::from(theta[i]) - h) as f32;
            let down = loss(&p)?;
            Ok((up - down) / (2.0 * h))
        })
        .collect()
}

/// Compares SPSA's descent direction with central finite differences on random
/// parameter subsets. Each trial perturbs only its subset.
pub fn fd_check<F>(
    theta: &[f32],
    loss: F,
    n_params: usize,
    h: f64,
    trials: usize,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&[f32]) -> Result<f64> + Sync,
{
    if h == 0.0 {
        return Err(Error::InvalidStep);
    }
    let n_params = n_params.min(theta.len());
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(trials);
    for _ in 0..trials {
        let mut indices: Vec<usize> = Vec::with_capacity(n_params);
        while indices.len() < n_params {
            let i = rng.below(theta.len());
            if !indices.contains(&i) {
                indices.push(i);
            }
        }
        let fd = central_differences(theta, &indices, h, &loss)?;
        let delta_sub = rademacher(&mut rng, n_params);
        let mut delta = vec![0.0; theta.len()];
        for (&i, &d) in indices.iter().zip(&delta_sub) {
            delta[i] = d;
        }
        // Zero entries of `delta` are untouched coordinates; only the subset is read back.
        let (_, lp, lm) = spsa_gradient(theta, &delta, h, &loss)?;
        let scale = (lp - lm) / (2.0 * h);
        let spsa: Vec<f64> = delta_sub.iter().map(|d| scale / d).collect();
        let inner = spsa.iter().zip(&fd).map(|(a, b)| a * b).sum();
        out.push(FdTrial {
            indices,
            fd_gradient: fd,
            spsa_gradient: spsa,
            inner_product: inner,
        });
    }
    Ok(FdReport { trials: out })
}

/// [`fd_check`] on the concept loss over the encoder's trainable parameters.
#[allow(clippy::too_many_arguments)]
pub fn fd_gradient_check(
    enc: &EncoderWeights,
    batch: &TrainingBatch,
    model: &ModelWeights,
    sched: &NoiseSchedule,
    cfg: &InjectionConfig,
    n_params: usize,
    h: f64,
    trials: usize,
    seed: u64,
) -> Result<FdReport> {
    let theta = enc.trainable_params();
    let loss = |p: &[f32]| {
        let w = enc.with_trainable_params(p)?;
        concept_loss(batch, &w, model, sched, cfg)
    };
    fd_check(&theta, loss, n_params, h, trials, seed)
}
