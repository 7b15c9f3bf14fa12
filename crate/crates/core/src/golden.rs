//! Frozen reference values and the probes that regenerate them.
//!
//! Each golden file is plain text so it can be inspected and diffed. The
//! probes fix every seed and input; a mismatch means numerics changed.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoder::{concept_loss, draw_batch, EncoderConfig, EncoderWeights, TrainConfig};
use crate::error::{Error, Result};
use crate::image::{toy_dataset, ReferenceImage};
use crate::rng::Rng;
use crate::scheduler::{NoiseSchedule, ScheduleConfig};
use crate::unet::{embed_prompt, ModelConfig, ModelWeights, VanillaProcessor};

pub const RNG_FILE: &str = "rng_seed42.txt";
pub const FORWARD_FILE: &str = "forward_seed1.sha256";
pub const LOSS_FILE: &str = "concept_loss.txt";

pub const MODEL_SEED: u64 = 1;
pub const ENCODER_SEED: u64 = 2;
const LATENT_SEED: u64 = 3;
const BATCH_SEED: u64 = 5;
const PROBE_T: usize = 500;

/// First eight raw outputs of `Rng::new(42)`.
pub fn rng_probe() -> Vec<u64> {
    let mut rng = Rng::new(42);
    (0..8).map(|_| rng.next_u64()).collect()
}

/// SHA-256 of the little-endian bytes of one vanilla forward.
pub fn forward_probe() -> Result<String> {
    let cfg = ModelConfig::default();
    let model = ModelWeights::init(cfg, MODEL_SEED)?;
    let shape = cfg.latent_shape();
    let x = Rng::new(LATENT_SEED)
        .normal_tensor(shape.iter().product())
        .reshape(&shape)?;
    let prompt = embed_prompt(&TrainConfig::default().prompt, &cfg)?;
    let (eps, _) = model.forward(&x, PROBE_T, &prompt, &mut VanillaProcessor)?;
    Ok(hex(&Sha256::digest(eps.to_le_bytes())))
}

/// Concept loss of the seeded encoder on one seeded batch of the toy set.
pub fn loss_probe() -> Result<f64> {
    let model = ModelWeights::init(ModelConfig::default(), MODEL_SEED)?;
    let enc = EncoderWeights::init(EncoderConfig::default(), ENCODER_SEED)?;
    let sched = NoiseSchedule::new(ScheduleConfig::default())?;
    let train = TrainConfig::default();
    let data = toy_dataset()
        .iter()
        .map(ReferenceImage::from_rgb8)
        .collect::<Result<Vec<_>>>()?;
    let prompt = embed_prompt(&train.prompt, &model.config)?;
    let batch = draw_batch(&data, &prompt, &sched, &mut Rng::new(BATCH_SEED))?;
    concept_loss(&batch, &enc, &model, &sched, &train.injection)
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn read(dir: &Path, name: &str) -> Result<String> {
    Ok(fs::read_to_string(dir.join(name))?)
}

fn malformed(name: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        kind: "golden",
        reason: format!("{name}: {}", reason.into()),
    }
}

pub fn render_rng(values: &[u64]) -> String {
    values.iter().map(|v| format!("{v:016x}\n")).collect()
}

pub fn parse_rng(text: &str) -> Result<Vec<u64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| u64::from_str_radix(l, 16).map_err(|e| malformed(RNG_FILE, e.to_string())))
        .collect()
}

pub fn render_loss(v: f64) -> String {
    format!("{v:.17e}\n")
}

pub fn parse_loss(text: &str) -> Result<f64> {
    text.trim()
        .parse()
        .map_err(|e: std::num::ParseFloatError| malformed(LOSS_FILE, e.to_string()))
}

/// Writes all golden files into `dir`.
pub fn write_all(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RNG_FILE), render_rng(&rng_probe()))?;
    fs::write(dir.join(FORWARD_FILE), format!("{}\n", forward_probe()?))?;
    fs::write(dir.join(LOSS_FILE), render_loss(loss_probe()?))?;
    Ok(())
}

/// Outcome of comparing one probe with its golden file.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldenCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, r: Result<(bool, String)>) -> GoldenCheck {
    match r {
        Ok((passed, detail)) => GoldenCheck {
            name,
            passed,
            detail,
        },
        Err(e) => GoldenCheck {
            name,
            passed: false,
            detail: e.to_string(),
        },
    }
}

/// Relative tolerance on the golden loss; covers libm differences in `exp`/`ln`.
pub const LOSS_RTOL: f64 = 1e-9;

pub fn verify_all(dir: &Path) -> Vec<GoldenCheck> {
    vec![
        check(
            "golden rng stream",
            (|| {
                let want = parse_rng(&read(dir, RNG_FILE)?)?;
                let got = rng_probe();
                Ok((want == got, format!("{} values", want.len())))
            })(),
        ),
        check(
            "golden forward hash",
            (|| {
                let want = read(dir, FORWARD_FILE)?.trim().to_string();
                let got = forward_probe()?;
                Ok((want == got, format!("sha256 {got}")))
            })(),
        ),
        check(
            "golden concept loss",
            (|| {
                let want = parse_loss(&read(dir, LOSS_FILE)?)?;
                let got = loss_probe()?;
                let ok = (got - want).abs() <= LOSS_RTOL * want.abs();
                Ok((ok, format!("{got:.12} vs {want:.12}")))
            })(),
        ),
    ]
}
