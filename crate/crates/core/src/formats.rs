//! Little-endian binary file formats.
//!
//! | ext     | layout |
//! |---------|--------|
//! | `.ten`  | `"ATNJ"`, u8 version, u8 ndim, ndim × u32 dims, f32 data |
//! | `.traj` | `"ATRJ"`, u32 T, (T+1) `.ten` blocks, (T+1) × u32 step indices |
//! | `.mw`   | `"MUNT"`, u8 version, 8 × u32 model config, f32 params |
//! | `.enc`  | `"CENC"`, u8 version, 6 × u32 encoder config, f32 params |
//!
//! In `.mw` the layer-norm epsilon is stored as its `f32` bit pattern.

use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, EncoderWeights};
use crate::error::{Error, Result};
use crate::scheduler::LatentTrajectory;
use crate::tensor::Tensor;
use crate::unet::{ModelConfig, ModelWeights};

pub const TENSOR_MAGIC: &[u8; 4] = b"ATNJ";
pub const TRAJECTORY_MAGIC: &[u8; 4] = b"ATRJ";
pub const MODEL_MAGIC: &[u8; 4] = b"MUNT";
pub const ENCODER_MAGIC: &[u8; 4] = b"CENC";
pub const VERSION: u8 = 1;

struct Cursor<'a> {
    kind: &'static str,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(kind: &'static str, bytes: &'a [u8]) -> Self {
        Self {
            kind,
            bytes,
            pos: 0,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.kind,
                format!("truncated at byte {} (need {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let m = self.take(4)?;
        if m != magic {
            return Err(Error::format(
                self.kind,
                format!("bad magic {:?}", String::from_utf8_lossy(m)),
            ));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u8()?;
        if v != VERSION {
            return Err(Error::format(self.kind, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::format(self.kind, "size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn tensor(&mut self) -> Result<Tensor> {
        self.magic(TENSOR_MAGIC)?;
        self.version()?;
        let ndim = self.u8()? as usize;
        if ndim == 0 {
            return Err(Error::format(self.kind, "zero-rank tensor"));
        }
        let shape = (0..ndim)
            .map(|_| self.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::format(self.kind, "size overflow"))?;
        let data = self.f32s(n)?;
        Tensor::new(shape, data).map_err(|e| Error::format(self.kind, e.to_string()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.kind,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, data: &[f32]) {
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(VERSION);
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        put_u32(out, d);
    }
    put_f32s(out, t.data());
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.ndim() + 4 * t.len());
    put_tensor(&mut out, t);
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut c = Cursor::new("tensor", bytes);
    let t = c.tensor()?;
    c.finish()?;
    Ok(t)
}

pub fn encode_trajectory(traj: &LatentTrajectory) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(TRAJECTORY_MAGIC);
    put_u32(&mut out, traj.total_steps());
    for t in &traj.latents {
        put_tensor(&mut out, t);
    }
    for &i in &traj.step_indices {
        put_u32(&mut out, i as usize);
    }
    out
}

pub fn decode_trajectory(bytes: &[u8]) -> Result<LatentTrajectory> {
    let mut c = Cursor::new("trajectory", bytes);
    c.magic(TRAJECTORY_MAGIC)?;
    let steps = c.u32()? as usize;
    let latents = (0..=steps).map(|_| c.tensor()).collect::<Result<Vec<_>>>()?;
    let step_indices = (0..=steps).map(|_| c.u32()).collect::<Result<Vec<_>>>()?;
    c.finish()?;
    if latents.windows(2).any(|w| w[0].shape() != w[1].shape()) {
        return Err(Error::format("trajectory", "latents differ in shape"));
    }
    Ok(LatentTrajectory {
        latents,
        step_indices,
    })
}

fn model_config_fields(cfg: &ModelConfig) -> [u32; 8] {
    [
        cfg.channels as u32,
        cfg.height as u32,
        cfg.width as u32,
        cfg.d_model as u32,
        cfg.heads as u32,
        cfg.layers as u32,
        cfg.mlp_hidden as u32,
        cfg.layernorm_eps.to_bits(),
    ]
}

pub fn encode_model(w: &ModelWeights) -> Vec<u8> {
    let mut out = Vec::with_capacity(37 + 4 * w.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(VERSION);
    for f in model_config_fields(&w.config) {
        out.extend_from_slice(&f.to_le_bytes());
    }
    for t in w.tensors() {
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelWeights> {
    let mut c = Cursor::new("model weights", bytes);
    c.magic(MODEL_MAGIC)?;
    c.version()?;
    let f: Vec<u32> = (0..8).map(|_| c.u32()).collect::<Result<_>>()?;
    let config = ModelConfig {
        channels: f[0] as usize,
        height: f[1] as usize,
        width: f[2] as usize,
        d_model: f[3] as usize,
        heads: f[4] as usize,
        layers: f[5] as usize,
        mlp_hidden: f[6] as usize,
        layernorm_eps: f32::from_bits(f[7]),
    };
    config
        .validate()
        .map_err(|e| Error::format("model weights", e.to_string()))?;
    // Shapes come from a throwaway init; only the layout is used.
    let template = ModelWeights::init(config, 0)?;
    let tensors = template
        .tensors()
        .into_iter()
        .map(|t| Tensor::new(t.shape().to_vec(), c.f32s(t.len())?))
        .collect::<Result<Vec<_>>>()?;
    c.finish()?;
    ModelWeights::from_tensors(config, tensors)
}

pub fn encode_encoder(w: &EncoderWeights) -> Vec<u8> {
    let cfg = &w.config;
    let mut out = Vec::new();
    out.extend_from_slice(ENCODER_MAGIC);
    out.push(VERSION);
    for v in [
        cfg.image_size,
        cfg.patch_size,
        cfg.channels,
        cfg.d_model,
        cfg.mlp_hidden,
        usize::from(cfg.train_patch_proj),
    ] {
        put_u32(&mut out, v);
    }
    for t in w.tensors() {
        put_f32s(&mut out, t.data());
    }
    out
}

pub fn decode_encoder(bytes: &[u8]) -> Result<EncoderWeights> {
    let mut c = Cursor::new("encoder weights", bytes);
    c.magic(ENCODER_MAGIC)?;
    c.version()?;
    let f: Vec<usize> = (0..6).map(|_| c.u32().map(|v| v as usize)).collect::<Result<_>>()?;
    if f[5] > 1 {
        return Err(Error::format("encoder weights", "trainable flag must be 0 or 1"));
    }
    let config = EncoderConfig {
        image_size: f[0],
        patch_size: f[1],
        channels: f[2],
        d_model: f[3],
        mlp_hidden: f[4],
        train_patch_proj: f[5] == 1,
    };
    config
        .validate()
        .map_err(|e| Error::format("encoder weights", e.to_string()))?;
    let template = EncoderWeights::init(config, 0)?;
    let tensors = template
        .tensors()
        .into_iter()
        .map(|t| Tensor::new(t.shape().to_vec(), c.f32s(t.len())?))
        .collect::<Result<Vec<_>>>()?;
    c.finish()?;
    EncoderWeights::from_tensors(config, tensors)
}

pub fn save(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    decode_tensor(&fs::read(path)?)
}

pub fn load_trajectory(path: &Path) -> Result<LatentTrajectory> {
    decode_trajectory(&fs::read(path)?)
}

pub fn load_model(path: &Path) -> Result<ModelWeights> {
    decode_model(&fs::read(path)?)
}

pub fn load_encoder(path: &Path) -> Result<EncoderWeights> {
    decode_encoder(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn tensor_layout_is_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.0]).unwrap();
        let b = encode_tensor(&t);
        let mut want = b"ATNJ".to_vec();
        want.extend([1, 2]);
        want.extend(1u32.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(1.0f32.to_le_bytes());
        want.extend((-2.0f32).to_le_bytes());
        assert_eq!(b, want);
    }

    #[test]
    fn tensor_rejects_garbage() {
        let b = encode_tensor(&Tensor::zeros(&[3]));
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
        let mut bad = b;
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
    }

    #[test]
    fn model_round_trip() {
        let w = ModelWeights::init(ModelConfig::default(), 5).unwrap();
        let b = encode_model(&w);
        assert_eq!(b.len(), 4 + 1 + 32 + 4 * 27_556);
        let back = decode_model(&b).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_model(&back), b);
    }

    #[test]
    fn encoder_round_trip() {
        let w = EncoderWeights::init(EncoderConfig::default(), 5).unwrap();
        let b = encode_encoder(&w);
        assert_eq!(&b[..4], b"CENC");
        let back = decode_encoder(&b).unwrap();
        assert_eq!(back, w);
        assert_eq!(encode_encoder(&back), b);
    }

    proptest! {
        #[test]
        fn tensor_bytes_round_trip(seed in any::<u64>(), dims in proptest::collection::vec(1usize..5, 1..4)) {
            let n = dims.iter().product();
            let t = Rng::new(seed).normal_tensor(n).reshape(&dims).unwrap();
            let b = encode_tensor(&t);
            let back = decode_tensor(&b).unwrap();
            prop_assert_eq!(&back, &t);
            prop_assert_eq!(encode_tensor(&back), b);
        }

        #[test]
        fn trajectory_bytes_round_trip(seed in any::<u64>(), steps in 1usize..6) {
            let mut rng = Rng::new(seed);
            let latents = (0..=steps).map(|_| rng.normal_tensor(8).reshape(&[2, 2, 2]).unwrap()).collect();
            let traj = LatentTrajectory { latents, step_indices: (0..=steps as u32).collect() };
            let b = encode_trajectory(&traj);
            let back = decode_trajectory(&b).unwrap();
            prop_assert_eq!(&back, &traj);
            prop_assert_eq!(encode_trajectory(&back), b);
        }
    }
}
