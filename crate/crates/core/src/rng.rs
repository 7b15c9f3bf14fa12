//! SplitMix64 stream with Box–Muller normals.
//!
//! The bit recipe is fixed so that noise is reproducible in any language:
//! uniforms are `((x >> 11) + 1) * 2^-53`, which lies in `(0, 1]`, and each
//! pair `(u1, u2)` yields `sqrt(-2 ln u1) * (cos 2πu2, sin 2πu2)`.

use std::f64::consts::PI;

use crate::tensor::Tensor;

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rng {
    state: u64,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }

    /// Uniform in `(0, 1]`.
    pub fn next_uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` by rejection-free modulo; `n` must be > 0.
    pub fn below(&mut self, n: usize) -> usize {
        (self.next_u64() % n as u64) as usize
    }

    /// `±1` with equal probability, from the low bit.
    pub fn rademacher(&mut self) -> f64 {
        if self.next_u64() & 1 == 1 {
            1.0
        } else {
            -1.0
        }
    }

    /// `n` standard normals as `f64`. Odd `n` discards the second value of the last pair.
    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let u1 = self.next_uniform();
            let u2 = self.next_uniform();
            let (z1, z2) = box_muller(u1, u2);
            out.push(z1);
            out.push(z2);
        }
        out.truncate(n);
        out
    }

    pub fn normal_tensor(&mut self, n: usize) -> Tensor {
        Tensor::from_vec(self.normals(n).into_iter().map(|v| v as f32).collect())
    }
}

pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let r = (-2.0 * u1.ln()).sqrt();
    let theta = 2.0 * PI * u2;
    (r * theta.cos(), r * theta.sin())
}

/// FNV-1a 64-bit hash.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}
