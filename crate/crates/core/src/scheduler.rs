//! Noise schedule, deterministic DDIM stepping and DDIM inversion.
//!
//! Schedule indices are 0-based training timesteps. The clean end of a
//! trajectory sits at index 0 and the inference timesteps are
//! `1, 1 + stride, …` so every latent of a trajectory has a real `ᾱ`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub beta_start: f64,
    pub beta_end: f64,
    pub train_steps: usize,
    pub inference_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            beta_start: 8.5e-4,
            beta_end: 1.2e-2,
            train_steps: 1000,
            inference_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub config: ScheduleConfig,
    pub betas: Vec<f32>,
    pub alpha_bars: Vec<f32>,
    /// Ascending training indices used at inference; sampling walks them in reverse.
    pub timesteps: Vec<usize>,
}

impl NoiseSchedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        let ScheduleConfig {
            beta_start,
            beta_end,
            train_steps,
            inference_steps,
        } = config;
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        if train_steps < 2 || inference_steps == 0 || inference_steps > train_steps {
            return Err(Error::InvalidSchedule(format!(
                "need 1 <= T <= train_steps, got T={inference_steps}, train_steps={train_steps}"
            )));
        }
        let (s0, s1) = (beta_start.sqrt(), beta_end.sqrt());
        let denom = (train_steps - 1) as f64;
        let betas64: Vec<f64> = (0..train_steps)
            .map(|i| (s0 + (s1 - s0) * i as f64 / denom).powi(2))
            .collect();
        let mut acc = 1.0f64;
        let alpha_bars = betas64
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc as f32
            })
            .collect::<Vec<_>>();
        let stride = train_steps / inference_steps;
        let timesteps = (0..inference_steps).map(|i| i * stride + 1).collect::<Vec<_>>();
        if *timesteps.last().unwrap() >= train_steps {
            return Err(Error::InvalidSchedule(format!(
                "offset timesteps overflow {train_steps} training steps"
            )));
        }
        let sched = Self {
            config,
            betas: betas64.iter().map(|&b| b as f32).collect(),
            alpha_bars,
            timesteps,
        };
        sched.check_invariants()?;
        Ok(sched)
    }

    fn check_invariants(&self) -> Result<()> {
        if self.betas.iter().any(|&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidSchedule("beta outside (0, 1)".into()));
        }
        if self.alpha_bars.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::InvalidSchedule("alpha_bar not strictly decreasing".into()));
        }
        if self.alpha_bars[0] <= 0.99 {
            return Err(Error::InvalidSchedule(format!(
                "first alpha_bar {} not above 0.99",
                self.alpha_bars[0]
            )));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.timesteps.len()
    }

    pub fn alpha_bar(&self, index: usize) -> f64 {
        f64::from(self.alpha_bars[index])
    }

    /// Schedule index of trajectory position `j` (0 = clean, `T` = noisiest).
    pub fn trajectory_index(&self, j: usize) -> usize {
        if j == 0 {
            0
        } else {
            self.timesteps[j - 1]
        }
    }

    /// All `T + 1` trajectory indices, ascending.
    pub fn trajectory_indices(&self) -> Vec<usize> {
        (0..=self.total_steps()).map(|j| self.trajectory_index(j)).collect()
    }

    /// `(t_from, t_to)` of denoise step `s ∈ 1..=T`.
    pub fn sampling_step(&self, s: usize) -> (usize, usize) {
        let j = self.total_steps() + 1 - s;
        (self.trajectory_index(j), self.trajectory_index(j - 1))
    }
}

fn ddim_update(x: &Tensor, eps: &Tensor, ab_from: f64, ab_to: f64) -> Result<Tensor> {
    if x.shape() != eps.shape() {
        return Err(Error::shape(format!(
            "ddim latent {:?} vs eps {:?}",
            x.shape(),
            eps.shape()
        )));
    }
    let (sa_from, sn_from) = (ab_from.sqrt(), (1.0 - ab_from).sqrt());
    let (sa_to, sn_to) = (ab_to.sqrt(), (1.0 - ab_to).sqrt());
    x.zip_with(eps, |xv, ev| {
        let (xv, ev) = (f64::from(xv), f64::from(ev));
        let x0 = (xv - sn_from * ev) / sa_from;
        (sa_to * x0 + sn_to * ev) as f32
    })
}

/// One deterministic (η = 0) DDIM step towards lower noise.
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_from < t_to {
        return Err(Error::InvalidSchedule(format!(
            "ddim_step must move to lower noise, got {t_from} -> {t_to}"
        )));
    }
    if t_from == t_to {
        if x_t.shape() != eps.shape() {
            return Err(Error::shape("ddim latent vs eps"));
        }
        return Ok(x_t.clone());
    }
    ddim_update(x_t, eps, sched.alpha_bar(t_from), sched.alpha_bar(t_to))
}

/// One DDIM inversion step towards higher noise, assuming `eps` is locally constant.
pub fn ddim_inverse_step(
    x_t: &Tensor,
    eps: &Tensor,
    t_from: usize,
    t_to: usize,
    sched: &NoiseSchedule,
) -> Result<Tensor> {
    if t_from > t_to {
        return Err(Error::InvalidSchedule(format!(
            "ddim_inverse_step must move to higher noise, got {t_from} -> {t_to}"
        )));
    }
    if t_from == t_to {
        if x_t.shape() != eps.shape() {
            return Err(Error::shape("ddim latent vs eps"));
        }
        return Ok(x_t.clone());
    }
    ddim_update(x_t, eps, sched.alpha_bar(t_from), sched.alpha_bar(t_to))
}

/// Anything that predicts noise for a latent at a schedule index.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor, t_index: usize) -> Result<Tensor>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentTrajectory {
    /// `latents[0]` is clean, `latents[T]` is the noisiest.
    pub latents: Vec<Tensor>,
    pub step_indices: Vec<u32>,
}

impl LatentTrajectory {
    pub fn total_steps(&self) -> usize {
        self.latents.len() - 1
    }

    /// Checks that this trajectory was produced with `sched`'s timesteps.
    pub fn check_schedule(&self, sched: &NoiseSchedule) -> Result<()> {
        let want: Vec<u32> = sched
            .trajectory_indices()
            .into_iter()
            .map(|i| i as u32)
            .collect();
        if self.latents.len() != self.step_indices.len() || self.step_indices != want {
            return Err(Error::TrajectoryMismatch(format!(
                "trajectory has {} latents with indices {:?}..., schedule expects T={}",
                self.latents.len(),
                &self.step_indices[..self.step_indices.len().min(3)],
                sched.total_steps()
            )));
        }
        Ok(())
    }
}

/// DDIM-inverts a clean latent into the full `T + 1` trajectory.
///
/// Step `j` moves from trajectory index `j-1` to `j` using the prediction at the
/// target timestep, so resampling with [`resample`] mirrors it exactly up to
/// the locally-constant-noise approximation.
pub fn invert_reference(
    x0: &Tensor,
    model: &impl NoisePredictor,
    sched: &NoiseSchedule,
) -> Result<LatentTrajectory> {
    x0.ensure_finite("reference latent")?;
    let steps = sched.total_steps();
    let mut latents = Vec::with_capacity(steps + 1);
    latents.push(x0.clone());
    for j in 1..=steps {
        let (from, to) = (sched.trajectory_index(j - 1), sched.trajectory_index(j));
        let prev = &latents[j - 1];
        let eps = model.predict_noise(prev, to)?;
        let next = ddim_inverse_step(prev, &eps, from, to, sched)?;
        latents.push(next);
    }
    let step_indices = sched
        .trajectory_indices()
        .into_iter()
        .map(|i| i as u32)
        .collect();
    Ok(LatentTrajectory {
        latents,
        step_indices,
    })
}

/// Plain DDIM sampling of `x_T` down to the clean end.
pub fn resample(x_t: &Tensor, model: &impl NoisePredictor, sched: &NoiseSchedule) -> Result<Tensor> {
    let mut x = x_t.clone();
    for s in 1..=sched.total_steps() {
        let (from, to) = sched.sampling_step(s);
        let eps = model.predict_noise(&x, from)?;
        x = ddim_step(&x, &eps, from, to, sched)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn default_schedule_shape() {
        let s = sched();
        assert_eq!(s.betas.len(), 1000);
        assert!((s.alpha_bars[0] - 0.99915).abs() < 1e-7);
        assert_eq!(s.timesteps.len(), 50);
        assert_eq!(s.timesteps[0], 1);
        assert_eq!(s.timesteps[1], 21);
        assert_eq!(*s.timesteps.last().unwrap(), 981);
        assert!(s.timesteps.windows(2).all(|w| w[1] - w[0] == 20));
    }

    #[test]
    fn rejects_bad_schedules() {
        let bad = [
            ScheduleConfig {
                beta_start: 0.02,
                beta_end: 0.01,
                ..Default::default()
            },
            ScheduleConfig {
                beta_start: 0.0,
                ..Default::default()
            },
            ScheduleConfig {
                inference_steps: 2000,
                ..Default::default()
            },
        ];
        for cfg in bad {
            assert!(matches!(
                NoiseSchedule::new(cfg),
                Err(Error::InvalidSchedule(_))
            ));
        }
    }

    #[test]
    fn sampling_steps_walk_indices_down() {
        let s = sched();
        assert_eq!(s.sampling_step(1), (981, 961));
        assert_eq!(s.sampling_step(50), (1, 0));
    }

    #[test]
    fn zero_eps_scales_by_alpha_ratio() {
        let s = sched();
        let x = Rng::new(5).normal_tensor(16);
        let eps = Tensor::zeros(&[16]);
        let ratio = (s.alpha_bar(21) / s.alpha_bar(41)).sqrt();
        let y = ddim_step(&x, &eps, 41, 21, &s).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((f64::from(*a) - ratio * f64::from(*b)).abs() < 1e-6);
        }
        let ratio = (s.alpha_bar(41) / s.alpha_bar(21)).sqrt();
        let y = ddim_inverse_step(&x, &eps, 21, 41, &s).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((f64::from(*a) - ratio * f64::from(*b)).abs() < 1e-6);
        }
    }

    #[test]
    fn equal_indices_is_identity() {
        let s = sched();
        let x = Rng::new(9).normal_tensor(8);
        let eps = Rng::new(10).normal_tensor(8);
        assert_eq!(ddim_step(&x, &eps, 21, 21, &s).unwrap(), x);
    }

    #[test]
    fn single_step_round_trip() {
        let s = sched();
        let mut rng = Rng::new(11);
        for (from, to) in [(981usize, 961usize), (501, 481), (21, 1), (1, 0)] {
            let x = rng.normal_tensor(256);
            let eps = rng.normal_tensor(256);
            let down = ddim_step(&x, &eps, from, to, &s).unwrap();
            let back = ddim_inverse_step(&down, &eps, to, from, &s).unwrap();
            assert!(back.max_abs_diff(&x).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let s = sched();
        let r = ddim_inverse_step(&Tensor::zeros(&[4]), &Tensor::zeros(&[5]), 1, 21, &s);
        assert!(matches!(r, Err(Error::DimensionMismatch(_))));
    }

    struct ConstEps(Tensor);
    impl NoisePredictor for ConstEps {
        fn predict_noise(&self, _: &Tensor, _: usize) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn constant_eps_inversion_is_exact() {
        let s = sched();
        let x0 = Rng::new(1).normal_tensor(32);
        let model = ConstEps(Rng::new(2).normal_tensor(32));
        let traj = invert_reference(&x0, &model, &s).unwrap();
        assert_eq!(traj.latents.len(), 51);
        assert_eq!(traj.latents[0], x0);
        traj.check_schedule(&s).unwrap();
        let rec = resample(&traj.latents[50], &model, &s).unwrap();
        assert!(rec.max_abs_diff(&x0).unwrap() < 1e-4);
    }
}
