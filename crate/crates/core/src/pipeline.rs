//! Dual-UNet personalized generation.
//!
//! The reference UNet replays the stored inversion trajectory with vanilla
//! attention and exposes its self-attention keys/values and cross-attention
//! maps; the generating UNet denoises fresh noise with injection installed.
//! Both share weights. The reference side never integrates anything, so its
//! features at step `s` depend only on the trajectory.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::encoder::{encode_concept, EncoderWeights};
use crate::error::{Error, Result};
use crate::image::ReferenceImage;
use crate::injector::{ConceptFeatures, ConceptMask, InjectionConfig, InjectionProcessor};
use crate::rng::Rng;
use crate::scheduler::{ddim_step, invert_reference, resample, LatentTrajectory, NoiseSchedule};
use crate::tensor::Tensor;
use crate::unet::{
    embed_prompt, AttentionTap, Denoiser, ModelWeights, PromptEmbedding, VanillaProcessor,
};

pub const PROXY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceInput {
    /// RGB reference: reduced to a latent, inverted, and fed to the concept encoder.
    Image(ReferenceImage),
    /// Clean latent to invert.
    Latent(Tensor),
    /// Precomputed inversion.
    Trajectory(LatentTrajectory),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationRequest {
    pub prompt_gen: Vec<String>,
    pub prompt_ref: Vec<String>,
    pub reference: ReferenceInput,
    /// Image for the concept encoder when `reference` is not an image.
    pub concept_image: Option<ReferenceImage>,
    pub cfg: InjectionConfig,
    pub seed: u64,
    /// Worker threads; above 1 the reference pass is precomputed in parallel.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostic {
    pub step: usize,
    pub t_index: usize,
    pub mask_frozen: bool,
    pub identity_proxy: f64,
    pub latent_norm: f64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub z0_gen: Tensor,
    pub trajectory: LatentTrajectory,
    pub mask: ConceptMask,
    pub identity_proxy: f64,
    pub diagnostics: Vec<StepDiagnostic>,
    /// Mask digest after each step.
    pub mask_digests: Vec<[u8; 32]>,
}

impl GenerationResult {
    /// Per-step CSV; wall-clock timings are left out so the file is reproducible.
    pub fn diagnostics_csv(&self) -> String {
        let mut s = String::from("step,t_index,mask_frozen,identity_proxy,latent_norm\n");
        for d in &self.diagnostics {
            writeln!(
                s,
                "{},{},{},{:.9},{:.9}",
                d.step,
                d.t_index,
                u8::from(d.mask_frozen),
                d.identity_proxy,
                d.latent_norm
            )
            .unwrap();
        }
        s
    }
}

/// Masked latent similarity in `[0, 1]`: `1 − Σ m(z−x)² / (2 Σ m(z²+x²+ε))`.
///
/// `mask` has one weight per spatial position and is broadcast over channels.
/// A mask with zero total weight falls back to uniform weights.
pub fn identity_proxy(z: &Tensor, x: &Tensor, mask: &Tensor) -> Result<f64> {
    if z.shape() != x.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", z.shape(), x.shape())));
    }
    let spatial = mask.len();
    if !z.len().is_multiple_of(spatial) {
        return Err(Error::shape(format!(
            "mask of {spatial} for latent {:?}",
            z.shape()
        )));
    }
    let total: f64 = mask.data().iter().map(|&m| f64::from(m)).sum();
    let weight = |i: usize| {
        if total > 0.0 {
            f64::from(mask.data()[i % spatial])
        } else {
            1.0
        }
    };
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (&a, &b)) in z.data().iter().zip(x.data()).enumerate() {
        let (a, b, m) = (f64::from(a), f64::from(b), weight(i));
        num += m * (a - b).powi(2);
        den += m * (a * a + b * b + PROXY_EPS);
    }
    Ok(1.0 - num / (2.0 * den))
}

/// Frozen model, optional concept encoder, and schedule.
pub struct Engine {
    pub model: ModelWeights,
    pub encoder: Option<EncoderWeights>,
    pub schedule: NoiseSchedule,
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))
}

impl Engine {
    pub fn new(model: ModelWeights, encoder: Option<EncoderWeights>, schedule: NoiseSchedule) -> Self {
        Self {
            model,
            encoder,
            schedule,
        }
    }

    pub fn latent_noise(&self, seed: u64) -> Result<Tensor> {
        let shape = self.model.config.latent_shape();
        Rng::new(seed)
            .normal_tensor(shape.iter().product())
            .reshape(&shape)
    }

    /// DDIM inversion of a clean latent under the reference prompt.
    pub fn invert(&self, x0: &Tensor, prompt_ref: &[String]) -> Result<LatentTrajectory> {
        let prompt = embed_prompt(prompt_ref, &self.model.config)?;
        let denoiser = Denoiser {
            weights: &self.model,
            prompt: &prompt,
        };
        invert_reference(x0, &denoiser, &self.schedule)
    }

    /// Resamples the noisiest trajectory latent back to the clean end.
    pub fn reconstruct(&self, traj: &LatentTrajectory, prompt_ref: &[String]) -> Result<Tensor> {
        traj.check_schedule(&self.schedule)?;
        let prompt = embed_prompt(prompt_ref, &self.model.config)?;
        let denoiser = Denoiser {
            weights: &self.model,
            prompt: &prompt,
        };
        resample(traj.latents.last().unwrap(), &denoiser, &self.schedule)
    }

    /// Single-UNet DDIM sampling with no injection.
    pub fn sample_vanilla(&self, prompt: &[String], seed: u64) -> Result<Tensor> {
        let prompt = embed_prompt(prompt, &self.model.config)?;
        let denoiser = Denoiser {
            weights: &self.model,
            prompt: &prompt,
        };
        resample(&self.latent_noise(seed)?, &denoiser, &self.schedule)
    }

    /// Inverts the request's reference unless it already is a trajectory.
    pub fn resolve_trajectory(&self, req: &GenerationRequest) -> Result<LatentTrajectory> {
        match &req.reference {
            ReferenceInput::Trajectory(t) => {
                t.check_schedule(&self.schedule)?;
                Ok(t.clone())
            }
            ReferenceInput::Latent(x0) => self.invert(x0, &req.prompt_ref),
            ReferenceInput::Image(img) => self.invert(&img.to_latent(), &req.prompt_ref),
        }
    }

    fn concept_features(&self, req: &GenerationRequest) -> Result<ConceptFeatures> {
        let image = match &req.reference {
            ReferenceInput::Image(img) => Some(img),
            _ => req.concept_image.as_ref(),
        };
        match (&self.encoder, image) {
            (Some(enc), Some(img)) => encode_concept(img, enc),
            _ => Ok(ConceptFeatures::default()),
        }
    }

    fn reference_tap(
        &self,
        traj: &LatentTrajectory,
        prompt_ref: &PromptEmbedding,
        step: usize,
    ) -> Result<AttentionTap> {
        let (t_from, _) = self.schedule.sampling_step(step);
        let j = self.schedule.total_steps() + 1 - step;
        let (_, tap) = self
            .model
            .forward(&traj.latents[j], t_from, prompt_ref, &mut VanillaProcessor)?;
        Ok(tap)
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult> {
        let cfg = &req.cfg;
        let steps = self.schedule.total_steps();
        if cfg.total_steps != steps {
            return Err(Error::TrajectoryMismatch(format!(
                "config T={} but schedule has {steps} steps",
                cfg.total_steps
            )));
        }
        let prompt_gen = embed_prompt(&req.prompt_gen, &self.model.config)?;
        let prompt_ref = embed_prompt(&req.prompt_ref, &self.model.config)?;
        cfg.validate(prompt_gen.len(), prompt_ref.len())?;

        let traj = self.resolve_trajectory(req)?;
        let concept = self.concept_features(req)?;
        let reference = &traj.latents[0];

        let precomputed: Option<Vec<AttentionTap>> = if req.jobs > 1 {
            let taps = pool(req.jobs)?.install(|| {
                (1..=steps)
                    .into_par_iter()
                    .map(|s| self.reference_tap(&traj, &prompt_ref, s))
                    .collect::<Result<Vec<_>>>()
            })?;
            Some(taps)
        } else {
            None
        };

        let tokens = self.model.config.tokens();
        let ones = Tensor::full(&[tokens], 1.0);
        let mut z = self.latent_noise(req.seed)?;
        let mut mask = ConceptMask::empty(tokens);
        let mut diagnostics = Vec::with_capacity(steps);
        let mut mask_digests = Vec::with_capacity(steps);
        for s in 1..=steps {
            let started = Instant::now();
            let (t_from, t_to) = self.schedule.sampling_step(s);
            let owned;
            let tap_ref = match &precomputed {
                Some(taps) => &taps[s - 1],
                None => {
                    owned = self.reference_tap(&traj, &prompt_ref, s)?;
                    &owned
                }
            };
            let (eps, tap_gen) = {
                let mut proc = InjectionProcessor {
                    cfg,
                    step: s,
                    reference: Some(tap_ref),
                    concept: &concept,
                    mask: &mask,
                };
                self.model.forward(&z, t_from, &prompt_gen, &mut proc)?
            };
            if s <= cfg.k {
                mask.accumulate_step(&tap_gen, tap_ref, cfg, s)?;
            }
            z = ddim_step(&z, &eps, t_from, t_to, &self.schedule)?;
            let target = &traj.latents[steps - s];
            let proxy_mask = if mask.frozen { &mask.m_r } else { &ones };
            diagnostics.push(StepDiagnostic {
                step: s,
                t_index: t_from,
                mask_frozen: mask.frozen,
                identity_proxy: identity_proxy(&z, target, proxy_mask)?,
                latent_norm: z.l2_norm(),
                elapsed: started.elapsed(),
            });
            mask_digests.push(mask.digest());
        }
        z.ensure_finite("generated latent")?;
        let proxy = identity_proxy(&z, reference, &mask.m_r)?;
        Ok(GenerationResult {
            z0_gen: z,
            trajectory: traj,
            mask,
            identity_proxy: proxy,
            diagnostics,
            mask_digests,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    SelfScale,
    CrossScale,
    MaskSteps,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ws" | "w_s" => Ok(SweepAxis::SelfScale),
            "wc" | "w_c" => Ok(SweepAxis::CrossScale),
            "k" => Ok(SweepAxis::MaskSteps),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis {other:?}"))),
        }
    }
}

impl std::fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepAxis::SelfScale => "ws",
            SweepAxis::CrossScale => "wc",
            SweepAxis::MaskSteps => "k",
        })
    }
}

impl SweepAxis {
    pub fn apply(&self, cfg: &InjectionConfig, value: f64) -> Result<InjectionConfig> {
        let mut out = cfg.clone();
        match self {
            SweepAxis::SelfScale => out.w_s = value as f32,
            SweepAxis::CrossScale => out.w_c = value as f32,
            SweepAxis::MaskSteps => {
                if value.fract() != 0.0 || value < 1.0 {
                    return Err(Error::InvalidConfig(format!("k must be a positive integer, got {value}")));
                }
                out.k = value as usize;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub axis: SweepAxis,
    pub value: f64,
    pub identity_proxy: f64,
    pub latent_norm: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("axis,value,identity_proxy,latent_norm\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{:.9},{:.9}",
            r.axis, r.value, r.identity_proxy, r.latent_norm
        )
        .unwrap();
    }
    s
}

impl Engine {
    /// Runs [`Engine::generate`] once per value of one knob; rows keep input order.
    pub fn sweep(
        &self,
        req: &GenerationRequest,
        axis: SweepAxis,
        values: &[f64],
        jobs: usize,
    ) -> Result<Vec<SweepRow>> {
        if values.is_empty() {
            return Err(Error::EmptySweep);
        }
        let base = GenerationRequest {
            reference: ReferenceInput::Trajectory(self.resolve_trajectory(req)?),
            concept_image: match &req.reference {
                ReferenceInput::Image(img) => Some(img.clone()),
                _ => req.concept_image.clone(),
            },
            jobs: 1,
            ..req.clone()
        };
        let run = |&value: &f64| -> Result<SweepRow> {
            let r = GenerationRequest {
                cfg: axis.apply(&base.cfg, value)?,
                ..base.clone()
            };
            let out = self.generate(&r)?;
            Ok(SweepRow {
                axis,
                value,
                identity_proxy: out.identity_proxy,
                latent_norm: out.z0_gen.l2_norm(),
            })
        };
        if jobs > 1 {
            pool(jobs)?.install(|| values.par_iter().map(run).collect())
        } else {
            values.iter().map(run).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn proxy_identical_is_one() {
        let z = Rng::new(1).normal_tensor(256).reshape(&[4, 8, 8]).unwrap();
        let m = Tensor::full(&[64], 0.7);
        assert!((identity_proxy(&z, &z, &m).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn proxy_negated_is_zero() {
        let z = Rng::new(2).normal_tensor(256).reshape(&[4, 8, 8]).unwrap();
        let m = Tensor::full(&[64], 0.3);
        assert!(identity_proxy(&z, &z.scale(-1.0), &m).unwrap().abs() < 1e-6);
    }

    #[test]
    fn proxy_shape_mismatch() {
        let r = identity_proxy(&Tensor::zeros(&[4, 8, 8]), &Tensor::zeros(&[4, 8, 7]), &Tensor::zeros(&[64]));
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn axis_parsing() {
        assert_eq!("ws".parse::<SweepAxis>().unwrap(), SweepAxis::SelfScale);
        assert_eq!("wc".parse::<SweepAxis>().unwrap(), SweepAxis::CrossScale);
        assert_eq!("k".parse::<SweepAxis>().unwrap(), SweepAxis::MaskSteps);
        assert!("bogus".parse::<SweepAxis>().is_err());
        let cfg = InjectionConfig::default();
        assert!(SweepAxis::MaskSteps.apply(&cfg, 1.5).is_err());
        assert_eq!(SweepAxis::MaskSteps.apply(&cfg, 3.0).unwrap().k, 3);
    }
}
