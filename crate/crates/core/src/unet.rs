//! MicroUNet: a small pre-LN transformer noise predictor.
//!
//! Tokens are the `H·W` spatial positions of a `C×H×W` latent. Each layer runs
//! self-attention, cross-attention over the prompt, and a ReLU MLP, all with
//! residual connections. Both attention kinds go through an
//! [`AttentionProcessor`], which is where injection hooks in.

use crate::error::{Error, Result};
use crate::math::{layer_norm, linear, matmul, relu, softmax_rows};
use crate::rng::{fnv1a64, Rng};
use crate::scheduler::NoisePredictor;
use crate::tensor::Tensor;

pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_hidden: usize,
    pub layernorm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 4,
            height: 8,
            width: 8,
            d_model: 32,
            heads: 1,
            layers: 2,
            mlp_hidden: 64,
            layernorm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.channels,
            self.height,
            self.width,
            self.d_model,
            self.heads,
            self.layers,
            self.mlp_hidden,
        ];
        if dims.contains(&0) {
            return Err(Error::InvalidConfig(format!("zero dimension in {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.heads != 1 {
            return Err(Error::InvalidConfig("only single-head attention is supported".into()));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::InvalidConfig("d_model must be even for the time embedding".into()));
        }
        if self.layernorm_eps.is_nan() || self.layernorm_eps <= 0.0 {
            return Err(Error::InvalidConfig("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Parameter count implied by the layout of [`ModelWeights`].
    pub fn param_count(&self) -> usize {
        let (d, h, c) = (self.d_model, self.mlp_hidden, self.channels);
        let per_layer = 6 * d + 8 * d * d + (d * h + h + h * d + d);
        self.layers * per_layer + (c * d + d) + (d * c + c) + 2 * (d * d + d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    pub q: Tensor,
    pub k: Tensor,
    pub v: Tensor,
    pub o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1_scale: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_scale: Tensor,
    pub ln2_bias: Tensor,
    pub ln3_scale: Tensor,
    pub ln3_bias: Tensor,
    pub self_attn: AttentionWeights,
    pub cross_attn: AttentionWeights,
    pub mlp_w1: Tensor,
    pub mlp_b1: Tensor,
    pub mlp_w2: Tensor,
    pub mlp_b2: Tensor,
}

/// All parameters. [`ModelWeights::tensors`] yields them in serialization order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    pub config: ModelConfig,
    pub layers: Vec<LayerWeights>,
    pub in_proj_w: Tensor,
    pub in_proj_b: Tensor,
    pub out_proj_w: Tensor,
    pub out_proj_b: Tensor,
    pub time_w1: Tensor,
    pub time_b1: Tensor,
    pub time_w2: Tensor,
    pub time_b2: Tensor,
}

enum Init {
    Normal,
    Ones,
    Zeros,
}

/// Parameter shapes and init rules in serialization order.
fn layout(cfg: &ModelConfig) -> Vec<(Vec<usize>, Init)> {
    let (d, h, c) = (cfg.d_model, cfg.mlp_hidden, cfg.channels);
    let mut out = Vec::new();
    for _ in 0..cfg.layers {
        for _ in 0..3 {
            out.push((vec![d], Init::Ones));
            out.push((vec![d], Init::Zeros));
        }
        for _ in 0..8 {
            out.push((vec![d, d], Init::Normal));
        }
        out.push((vec![d, h], Init::Normal));
        out.push((vec![h], Init::Normal));
        out.push((vec![h, d], Init::Normal));
        out.push((vec![d], Init::Normal));
    }
    out.push((vec![c, d], Init::Normal));
    out.push((vec![d], Init::Normal));
    out.push((vec![d, c], Init::Normal));
    out.push((vec![c], Init::Normal));
    out.push((vec![d, d], Init::Normal));
    out.push((vec![d], Init::Normal));
    out.push((vec![d, d], Init::Normal));
    out.push((vec![d], Init::Normal));
    out
}

impl ModelWeights {
    /// Seeded init: Normal(0, 0.02) in serialization order; layer norms start at identity
    /// and draw nothing from the stream.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed);
        let tensors = layout(&config)
            .into_iter()
            .map(|(shape, init)| {
                let n = shape.iter().product();
                let data = match init {
                    Init::Normal => rng
                        .normals(n)
                        .into_iter()
                        .map(|v| (v * f64::from(INIT_STD)) as f32)
                        .collect(),
                    Init::Ones => vec![1.0; n],
                    Init::Zeros => vec![0.0; n],
                };
                Tensor::from_parts(shape, data)
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds weights from tensors in serialization order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = layout(&config);
        if tensors.len() != shapes.len()
            || tensors
                .iter()
                .zip(&shapes)
                .any(|(t, (s, _))| t.shape() != s.as_slice())
        {
            return Err(Error::shape("weight tensors do not match config layout"));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let (ln1_scale, ln1_bias) = (next(), next());
            let (ln2_scale, ln2_bias) = (next(), next());
            let (ln3_scale, ln3_bias) = (next(), next());
            let self_attn = AttentionWeights {
                q: next(),
                k: next(),
                v: next(),
                o: next(),
            };
            let cross_attn = AttentionWeights {
                q: next(),
                k: next(),
                v: next(),
                o: next(),
            };
            layers.push(LayerWeights {
                ln1_scale,
                ln1_bias,
                ln2_scale,
                ln2_bias,
                ln3_scale,
                ln3_bias,
                self_attn,
                cross_attn,
                mlp_w1: next(),
                mlp_b1: next(),
                mlp_w2: next(),
                mlp_b2: next(),
            });
        }
        Ok(Self {
            config,
            layers,
            in_proj_w: next(),
            in_proj_b: next(),
            out_proj_w: next(),
            out_proj_b: next(),
            time_w1: next(),
            time_b1: next(),
            time_w2: next(),
            time_b2: next(),
        })
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend([
                &l.ln1_scale,
                &l.ln1_bias,
                &l.ln2_scale,
                &l.ln2_bias,
                &l.ln3_scale,
                &l.ln3_bias,
            ]);
            for a in [&l.self_attn, &l.cross_attn] {
                out.extend([&a.q, &a.k, &a.v, &a.o]);
            }
            out.extend([&l.mlp_w1, &l.mlp_b1, &l.mlp_w2, &l.mlp_b2]);
        }
        out.extend([
            &self.in_proj_w,
            &self.in_proj_b,
            &self.out_proj_w,
            &self.out_proj_b,
            &self.time_w1,
            &self.time_b1,
            &self.time_w2,
            &self.time_b2,
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<f32> {
        self.tensors()
            .into_iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptEmbedding {
    pub tokens: Tensor,
    pub words: Vec<String>,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Toy text encoder: each word's FNV-1a hash seeds a stream of `N(0, 1/d)` draws.
pub fn embed_prompt<S: AsRef<str>>(words: &[S], config: &ModelConfig) -> Result<PromptEmbedding> {
    if words.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let d = config.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let mut data = Vec::with_capacity(words.len() * d);
    for w in words {
        let mut rng = Rng::new(fnv1a64(w.as_ref().as_bytes()));
        data.extend(rng.normals(d).into_iter().map(|v| (v * scale) as f32));
    }
    Ok(PromptEmbedding {
        tokens: Tensor::from_parts(vec![words.len(), d], data),
        words: words.iter().map(|w| w.as_ref().to_owned()).collect(),
    })
}

/// Sinusoidal embedding of a timestep index: `[sin(t·f_i)…, cos(t·f_i)…]`, `f_i = 10000^(-i/(d/2))`.
pub fn timestep_embedding(t: usize, d: usize) -> Vec<f32> {
    let half = d / 2;
    let mut out = vec![0.0; d];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin() as f32;
        out[half + i] = arg.cos() as f32;
    }
    out
}

pub struct SelfAttentionOutput {
    /// Attention result before the output projection.
    pub out: Tensor,
    /// The layer's own keys and values, tapped for the reference pass.
    pub key: Tensor,
    pub value: Tensor,
}

pub struct CrossAttentionOutput {
    pub out: Tensor,
    /// Row-stochastic attention probabilities before any scaling or masking.
    pub probs: Tensor,
}

/// Replaceable attention computation. The model applies `W^O` to the result.
pub trait AttentionProcessor {
    fn self_attention(
        &mut self,
        layer: usize,
        hidden: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<SelfAttentionOutput>;

    fn cross_attention(
        &mut self,
        layer: usize,
        hidden: &Tensor,
        context: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<CrossAttentionOutput>;
}

/// `softmax(QKᵀ/√d)`.
pub fn attention_probs(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (_, d) = q.dims2()?;
    let scores = matmul(q, &k.transpose2()?)?;
    let scale = (1.0 / (d as f64).sqrt()) as f32;
    softmax_rows(&scores.scale(scale))
}

pub fn vanilla_self_attention(hidden: &Tensor, w: &AttentionWeights) -> Result<SelfAttentionOutput> {
    let q = matmul(hidden, &w.q)?;
    let key = matmul(hidden, &w.k)?;
    let value = matmul(hidden, &w.v)?;
    let probs = attention_probs(&q, &key)?;
    let out = matmul(&probs, &value)?;
    Ok(SelfAttentionOutput { out, key, value })
}

pub fn vanilla_cross_attention(
    hidden: &Tensor,
    context: &Tensor,
    w: &AttentionWeights,
) -> Result<CrossAttentionOutput> {
    let q = matmul(hidden, &w.q)?;
    let k = matmul(context, &w.k)?;
    let v = matmul(context, &w.v)?;
    let probs = attention_probs(&q, &k)?;
    let out = matmul(&probs, &v)?;
    Ok(CrossAttentionOutput { out, probs })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct VanillaProcessor;

impl AttentionProcessor for VanillaProcessor {
    fn self_attention(
        &mut self,
        _layer: usize,
        hidden: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<SelfAttentionOutput> {
        vanilla_self_attention(hidden, weights)
    }

    fn cross_attention(
        &mut self,
        _layer: usize,
        hidden: &Tensor,
        context: &Tensor,
        weights: &AttentionWeights,
    ) -> Result<CrossAttentionOutput> {
        vanilla_cross_attention(hidden, context, weights)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionTap {
    pub key: Tensor,
    pub value: Tensor,
}

/// Per-layer attention features from one forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AttentionTap {
    pub self_attn: Vec<SelfAttentionTap>,
    pub cross_maps: Vec<Tensor>,
}

/// Latent `C×H×W` to tokens `N×C`.
pub fn latent_to_tokens(x: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    if x.shape() != cfg.latent_shape() {
        return Err(Error::shape(format!(
            "latent {:?}, model expects {:?}",
            x.shape(),
            cfg.latent_shape()
        )));
    }
    Tensor::new(vec![cfg.channels, cfg.tokens()], x.data().to_vec())?.transpose2()
}

/// Tokens `N×C` back to a `C×H×W` latent.
pub fn tokens_to_latent(t: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    t.transpose2()?.reshape(&cfg.latent_shape())
}

impl ModelWeights {
    fn time_features(&self, t_index: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        let sin = Tensor::new(vec![1, d], timestep_embedding(t_index, d))?;
        let h = relu(&linear(&sin, &self.time_w1, Some(&self.time_b1))?);
        linear(&h, &self.time_w2, Some(&self.time_b2))
    }

    /// Predicts noise for `x_t`, routing every attention call through `processor`.
    pub fn forward(
        &self,
        x_t: &Tensor,
        t_index: usize,
        prompt: &PromptEmbedding,
        processor: &mut dyn AttentionProcessor,
    ) -> Result<(Tensor, AttentionTap)> {
        let cfg = &self.config;
        if prompt.tokens.dims2()?.1 != cfg.d_model {
            return Err(Error::shape("prompt width differs from d_model"));
        }
        let tokens = latent_to_tokens(x_t, cfg)?;
        let temb = self.time_features(t_index)?;
        let mut h = linear(&tokens, &self.in_proj_w, Some(&self.in_proj_b))?.add_row(temb.data())?;

        let mut tap = AttentionTap::default();
        for (l, lw) in self.layers.iter().enumerate() {
            let n1 = layer_norm(&h, &lw.ln1_scale, &lw.ln1_bias, cfg.layernorm_eps)?;
            let sa = processor.self_attention(l, &n1, &lw.self_attn)?;
            h = h.add(&matmul(&sa.out, &lw.self_attn.o)?)?;
            tap.self_attn.push(SelfAttentionTap {
                key: sa.key,
                value: sa.value,
            });

            let n2 = layer_norm(&h, &lw.ln2_scale, &lw.ln2_bias, cfg.layernorm_eps)?;
            let ca = processor.cross_attention(l, &n2, &prompt.tokens, &lw.cross_attn)?;
            h = h.add(&matmul(&ca.out, &lw.cross_attn.o)?)?;
            tap.cross_maps.push(ca.probs);

            let n3 = layer_norm(&h, &lw.ln3_scale, &lw.ln3_bias, cfg.layernorm_eps)?;
            let m = relu(&linear(&n3, &lw.mlp_w1, Some(&lw.mlp_b1))?);
            h = h.add(&linear(&m, &lw.mlp_w2, Some(&lw.mlp_b2))?)?;
            h.ensure_finite("hidden state")?;
        }
        let out = linear(&h, &self.out_proj_w, Some(&self.out_proj_b))?;
        out.ensure_finite("noise prediction")?;
        Ok((tokens_to_latent(&out, cfg)?, tap))
    }
}

/// A model bound to one prompt with vanilla attention; the plain noise predictor.
pub struct Denoiser<'a> {
    pub weights: &'a ModelWeights,
    pub prompt: &'a PromptEmbedding,
}

impl NoisePredictor for Denoiser<'_> {
    fn predict_noise(&self, x_t: &Tensor, t_index: usize) -> Result<Tensor> {
        Ok(self
            .weights
            .forward(x_t, t_index, self.prompt, &mut VanillaProcessor)?
            .0)
    }
}
