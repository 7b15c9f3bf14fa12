//! Binary PPM/PGM images, the fixed image→latent reduction, and the toy dataset.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 32;
pub const IMAGE_CHANNELS: usize = 3;
const POOL: usize = 4;

/// An RGB image as `3×H×W` values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceImage {
    pub pixels: Tensor,
}

impl ReferenceImage {
    /// Clamps into `[0, 1]`; shape must be `3×32×32`.
    pub fn new(pixels: Tensor) -> Result<Self> {
        if pixels.shape() != [IMAGE_CHANNELS, IMAGE_SIZE, IMAGE_SIZE] {
            return Err(Error::shape(format!(
                "reference image {:?}, expected [3, 32, 32]",
                pixels.shape()
            )));
        }
        pixels.ensure_finite("reference image")?;
        Ok(Self {
            pixels: pixels.map(|v| v.clamp(0.0, 1.0)),
        })
    }

    pub fn from_rgb8(img: &Rgb8) -> Result<Self> {
        let (w, h) = (img.width, img.height);
        let mut data = vec![0.0; 3 * w * h];
        for (i, px) in img.data.chunks(3).enumerate() {
            for c in 0..3 {
                data[c * w * h + i] = f32::from(px[c]) / 255.0;
            }
        }
        Self::new(Tensor::new(vec![3, h, w], data)?)
    }

    /// 4×4 average pool per channel, luminance as a fourth channel, then `(v − 0.5)·2`.
    pub fn to_latent(&self) -> Tensor {
        let s = IMAGE_SIZE / POOL;
        let px = self.pixels.data();
        let mut pooled = vec![[0.0f64; 3]; s * s];
        for c in 0..3 {
            for y in 0..IMAGE_SIZE {
                for x in 0..IMAGE_SIZE {
                    let v = f64::from(px[c * IMAGE_SIZE * IMAGE_SIZE + y * IMAGE_SIZE + x]);
                    pooled[(y / POOL) * s + x / POOL][c] += v;
                }
            }
        }
        let norm = (POOL * POOL) as f64;
        let mut out = vec![0.0f32; 4 * s * s];
        for (i, p) in pooled.iter().enumerate() {
            let rgb = p.map(|v| v / norm);
            let lum = 0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2];
            for (c, v) in rgb.iter().chain(std::iter::once(&lum)).enumerate() {
                out[c * s * s + i] = ((v - 0.5) * 2.0) as f32;
            }
        }
        Tensor::from_parts(vec![4, s, s], out)
    }
}

/// Interleaved 8-bit RGB.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8 {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count {
        if i >= bytes.len() {
            return Err(Error::format("pnm", "truncated header"));
        }
        let b = bytes[i];
        if b == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
        } else if b.is_ascii_whitespace() {
            i += 1;
        } else {
            let start = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
        }
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(Error::format("pnm", "missing whitespace after header"));
    }
    Ok((tokens, i + 1))
}

fn parse_pnm(bytes: &[u8], magic: &str, channels: usize) -> Result<(usize, usize, Vec<u8>)> {
    let (tok, offset) = header_tokens(bytes, 4)?;
    if tok[0] != magic {
        return Err(Error::format("pnm", format!("expected {magic}, found {}", tok[0])));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::format("pnm", format!("bad header number {s:?}")))
    };
    let (w, h, maxval) = (num(&tok[1])?, num(&tok[2])?, num(&tok[3])?);
    if w == 0 || h == 0 || maxval != 255 {
        return Err(Error::format("pnm", format!("unsupported {w}x{h} maxval {maxval}")));
    }
    let n = w * h * channels;
    let body = &bytes[offset..];
    if body.len() < n {
        return Err(Error::format(
            "pnm",
            format!("expected {n} pixel bytes, found {}", body.len()),
        ));
    }
    Ok((w, h, body[..n].to_vec()))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Rgb8> {
    let (width, height, data) = parse_pnm(bytes, "P6", 3)?;
    Ok(Rgb8 {
        width,
        height,
        data,
    })
}

pub fn encode_ppm(img: &Rgb8) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_ppm(path: &Path) -> Result<Rgb8> {
    decode_ppm(&fs::read(path)?)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    parse_pnm(bytes, "P5", 1)
}

pub fn encode_pgm(width: usize, height: usize, data: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(data);
    out
}

/// A `[0, 1]` spatial mask as an 8-bit PGM (`round(v·255)`).
pub fn mask_to_pgm(mask: &Tensor, width: usize, height: usize) -> Result<Vec<u8>> {
    if mask.len() != width * height {
        return Err(Error::shape(format!(
            "mask of {} values for {width}x{height}",
            mask.len()
        )));
    }
    let data: Vec<u8> = mask
        .data()
        .iter()
        .map(|&v| (f64::from(v.clamp(0.0, 1.0)) * 255.0).round() as u8)
        .collect();
    Ok(encode_pgm(width, height, &data))
}

pub const TOY_DATASET_SIZE: usize = 8;
pub const TOY_DATASET_SEED: u64 = 0x7f4a_2024;

/// One procedurally generated image: a dark background with soft colored blobs.
pub fn toy_image(index: usize, seed: u64) -> Rgb8 {
    let mut rng = Rng::new(seed ^ (index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let bg: [f64; 3] = [0.1, 0.1, 0.1].map(|b| b + 0.15 * rng.next_uniform());
    // Distinct hue per image: one dominant channel, rotated by index.
    let mut color = [0.2 + 0.2 * rng.next_uniform(); 3];
    color[index % 3] = 0.85 + 0.15 * rng.next_uniform();
    if index >= 3 {
        color[(index + 1) % 3] = 0.5 + 0.4 * rng.next_uniform();
    }
    let blobs = 1 + index % 2;
    let centers: Vec<(f64, f64, f64)> = (0..blobs)
        .map(|_| {
            let cx = 6.0 + 20.0 * rng.next_uniform();
            let cy = 6.0 + 20.0 * rng.next_uniform();
            let r = 3.0 + 4.0 * rng.next_uniform();
            (cx, cy, r)
        })
        .collect();
    let mut data = Vec::with_capacity(IMAGE_SIZE * IMAGE_SIZE * 3);
    for y in 0..IMAGE_SIZE {
        for x in 0..IMAGE_SIZE {
            let a = centers
                .iter()
                .map(|&(cx, cy, r)| {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    (-d2 / (2.0 * r * r)).exp()
                })
                .fold(0.0, f64::max);
            for c in 0..3 {
                let v = bg[c] * (1.0 - a) + color[c] * a;
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    Rgb8 {
        width: IMAGE_SIZE,
        height: IMAGE_SIZE,
        data,
    }
}

pub fn toy_dataset() -> Vec<Rgb8> {
    (0..TOY_DATASET_SIZE)
        .map(|i| toy_image(i, TOY_DATASET_SEED))
        .collect()
}

/// Loads every `.ppm` in a directory, sorted by file name.
pub fn load_ppm_dir(dir: &Path) -> Result<Vec<ReferenceImage>> {
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| ReferenceImage::from_rgb8(&read_ppm(p)?))
        .collect()
}
