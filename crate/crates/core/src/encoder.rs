//! Miniature masked-prediction speech encoder.
//!
//! ```text
//! input ─► extractor ─► [mask replace] ─► + sinusoidal positions
//!       ─► transformer layer 1..L (pre-norm, residual) ─► final norm ─► cluster head
//! ```
//!
//! The extractor either projects precomputed `T × F` frames to `T × D`, or
//! runs a strided 1-D convolution stack over a raw signal. Masked frames are
//! replaced by one learned vector after the extractor, so the content of a
//! masked frame cannot reach any output.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::numerics::{BoundParams, Graph, ParamStore, Tensor, Var};

pub const MASK_EMBEDDING: &str = "encoder.mask_embedding";
pub const EXTRACTOR_PREFIX: &str = "encoder.extractor.";
pub const HEAD_PREFIX: &str = "encoder.head.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputKind {
    /// Precomputed `T × feature_dim` frames, linearly projected.
    Frames { feature_dim: usize },
    /// Raw mono signal through a strided convolution stack.
    Signal { conv_layers: Vec<ConvLayerSpec> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderPreset {
    Desk,
    FullScale,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input: InputKind,
    pub embed_dim: usize,
    pub num_transformer_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub num_clusters: usize,
    pub max_frames: usize,
}

impl EncoderConfig {
    /// D = 32, three layers, over precomputed frames.
    pub fn desk(feature_dim: usize, num_clusters: usize) -> Self {
        Self {
            input: InputKind::Frames { feature_dim },
            embed_dim: 32,
            num_transformer_layers: 3,
            num_heads: 4,
            ffn_dim: 64,
            num_clusters,
            max_frames: 1024,
        }
    }

    /// Base-size reference: six conv layers, D = 768, twelve transformer layers.
    pub fn full_scale(num_clusters: usize) -> Self {
        let conv = |out_channels, kernel, stride| ConvLayerSpec {
            out_channels,
            kernel,
            stride,
        };
        Self {
            input: InputKind::Signal {
                conv_layers: vec![
                    conv(512, 10, 5),
                    conv(512, 3, 2),
                    conv(512, 3, 2),
                    conv(512, 3, 2),
                    conv(512, 2, 2),
                    conv(512, 2, 2),
                ],
            },
            embed_dim: 768,
            num_transformer_layers: 12,
            num_heads: 12,
            ffn_dim: 3072,
            num_clusters,
            max_frames: 4096,
        }
    }

    pub fn from_preset(preset: EncoderPreset, feature_dim: usize, num_clusters: usize) -> Self {
        match preset {
            EncoderPreset::Desk => Self::desk(feature_dim, num_clusters),
            EncoderPreset::FullScale => Self::full_scale(num_clusters),
        }
    }

    pub fn with_clusters(&self, num_clusters: usize) -> Self {
        Self {
            num_clusters,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("num_transformer_layers", self.num_transformer_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
            ("num_clusters", self.num_clusters),
            ("max_frames", self.max_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        match &self.input {
            InputKind::Frames { feature_dim: 0 } => {
                Err(Error::Config("feature_dim must be positive".into()))
            }
            InputKind::Signal { conv_layers } if conv_layers.is_empty() => {
                Err(Error::Config("signal input needs at least one conv layer".into()))
            }
            InputKind::Signal { conv_layers }
                if conv_layers
                    .iter()
                    .any(|c| c.kernel == 0 || c.stride == 0 || c.out_channels == 0) =>
            {
                Err(Error::Config("conv layers need positive sizes".into()))
            }
            _ => Ok(()),
        }
    }

    /// Product of conv strides (1 for the frames path).
    pub fn total_stride(&self) -> usize {
        match &self.input {
            InputKind::Frames { .. } => 1,
            InputKind::Signal { conv_layers } => conv_layers.iter().map(|c| c.stride).product(),
        }
    }

    /// Number of extractor output frames for an input of `len` samples/frames.
    pub fn output_frames(&self, len: usize) -> Result<usize> {
        match &self.input {
            InputKind::Frames { .. } => {
                if len == 0 {
                    Err(Error::Length("zero-length input".into()))
                } else {
                    Ok(len)
                }
            }
            InputKind::Signal { conv_layers } => {
                let mut t = len;
                for (i, c) in conv_layers.iter().enumerate() {
                    if t < c.kernel {
                        return Err(Error::Length(format!(
                            "{len}-sample input is shorter than the receptive field (conv layer {i} sees {t} < kernel {})",
                            c.kernel
                        )));
                    }
                    t = (t - c.kernel) / c.stride + 1;
                }
                Ok(t)
            }
        }
    }
}

/// Frames selected for masking in one utterance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub num_frames: usize,
    /// Sorted, unique.
    pub masked_indices: Vec<usize>,
    pub span_length: usize,
    pub mask_prob: f64,
}

impl MaskSpec {
    pub fn none(num_frames: usize) -> Self {
        Self {
            num_frames,
            masked_indices: Vec::new(),
            span_length: 1,
            mask_prob: 0.0,
        }
    }

    pub fn from_indices(num_frames: usize, indices: &[usize]) -> Result<Self> {
        let mut idx = indices.to_vec();
        idx.sort_unstable();
        idx.dedup();
        if idx.last().is_some_and(|&i| i >= num_frames) {
            return Err(Error::Input(format!(
                "mask index {} out of range for {num_frames} frames",
                idx.last().unwrap()
            )));
        }
        Ok(Self {
            num_frames,
            masked_indices: idx,
            span_length: 1,
            mask_prob: 0.0,
        })
    }

    pub fn flags(&self) -> Vec<bool> {
        let mut f = vec![false; self.num_frames];
        for &i in &self.masked_indices {
            f[i] = true;
        }
        f
    }

    pub fn num_masked(&self) -> usize {
        self.masked_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masked_indices.is_empty()
    }

    pub fn unmasked_indices(&self) -> Vec<usize> {
        let flags = self.flags();
        (0..self.num_frames).filter(|&i| !flags[i]).collect()
    }
}

/// Each frame starts a span with probability `mask_prob`; spans of
/// `span_length` frames (cut at the sequence end) are unioned.
pub fn sample_mask<R: Rng + ?Sized>(
    num_frames: usize,
    mask_prob: f64,
    span_length: usize,
    rng: &mut R,
) -> Result<MaskSpec> {
    if !(0.0..=1.0).contains(&mask_prob) {
        return Err(Error::Config(format!("mask_prob {mask_prob} outside [0, 1]")));
    }
    if span_length == 0 {
        return Err(Error::Config("span_length must be at least 1".into()));
    }
    let mut flags = vec![false; num_frames];
    for start in 0..num_frames {
        if rng.random_bool(mask_prob) {
            let end = (start + span_length).min(num_frames);
            flags[start..end].iter_mut().for_each(|f| *f = true);
        }
    }
    Ok(MaskSpec {
        num_frames,
        masked_indices: (0..num_frames).filter(|&i| flags[i]).collect(),
        span_length,
        mask_prob,
    })
}

/// `pe[t][2i] = sin(t / 10000^(2i/D))`, `pe[t][2i+1] = cos(...)`.
pub fn sinusoidal_positions(num_frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; num_frames * dim];
    for t in 0..num_frames {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::matrix(num_frames, dim, data).expect("shape by construction")
}

fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect())
        .expect("shape by construction")
}

fn insert_linear(p: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: &str, fan_in: usize, fan_out: usize) {
    p.insert(
        format!("{prefix}.weight"),
        normal_tensor(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt()),
    );
    p.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]));
}

fn insert_norm(p: &mut ParamStore, prefix: &str, dim: usize) {
    p.insert(format!("{prefix}.gamma"), Tensor::full(&[dim], 1.0));
    p.insert(format!("{prefix}.beta"), Tensor::zeros(&[dim]));
}

/// Freshly initialised encoder parameters (including the cluster head).
pub fn init_params(config: &EncoderConfig, seed: u64) -> Result<ParamStore> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.embed_dim;
    let mut p = ParamStore::new();

    match &config.input {
        InputKind::Frames { feature_dim } => {
            insert_linear(&mut p, &mut rng, "encoder.extractor.proj", *feature_dim, d);
        }
        InputKind::Signal { conv_layers } => {
            let mut c_in = 1;
            for (i, c) in conv_layers.iter().enumerate() {
                let fan_in = c.kernel * c_in;
                p.insert(
                    format!("encoder.extractor.conv.{i}.weight"),
                    normal_tensor(&mut rng, &[c.out_channels, fan_in], 1.0 / (fan_in as f64).sqrt()),
                );
                p.insert(format!("encoder.extractor.conv.{i}.bias"), Tensor::zeros(&[c.out_channels]));
                c_in = c.out_channels;
            }
            insert_linear(&mut p, &mut rng, "encoder.extractor.proj", c_in, d);
        }
    }
    insert_norm(&mut p, "encoder.extractor.norm", d);
    p.insert(MASK_EMBEDDING, normal_tensor(&mut rng, &[d], 1.0));

    for l in 0..config.num_transformer_layers {
        let pre = format!("encoder.transformer.{l}");
        insert_norm(&mut p, &format!("{pre}.attention_norm"), d);
        for part in ["query", "key", "value", "output"] {
            insert_linear(&mut p, &mut rng, &format!("{pre}.attention.{part}"), d, d);
        }
        // A key bias only shifts each query's scores by a constant, which
        // softmax ignores; its gradient is identically zero.
        p.remove(&format!("{pre}.attention.key.bias"));
        insert_norm(&mut p, &format!("{pre}.ffn_norm"), d);
        insert_linear(&mut p, &mut rng, &format!("{pre}.ffn.up"), d, config.ffn_dim);
        insert_linear(&mut p, &mut rng, &format!("{pre}.ffn.down"), config.ffn_dim, d);
    }
    insert_norm(&mut p, "encoder.final_norm", d);
    insert_linear(&mut p, &mut rng, "encoder.head.proj", d, config.num_clusters);
    Ok(p)
}

/// Re-initialises the cluster head when its width differs from
/// `config.num_clusters`. Returns whether a reset happened.
pub fn reset_head_if_needed(params: &mut ParamStore, config: &EncoderConfig, seed: u64) -> Result<bool> {
    let current = params
        .get("encoder.head.proj.bias")
        .map(|t| t.len());
    if current == Some(config.num_clusters) {
        return Ok(false);
    }
    params.remove_prefix(HEAD_PREFIX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    insert_linear(params, &mut rng, "encoder.head.proj", config.embed_dim, config.num_clusters);
    Ok(true)
}

pub(crate) fn linear(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let b = bound.var(&format!("{prefix}.bias"))?;
    let y = linear_no_bias(g, bound, prefix, x)?;
    g.add_bias(y, b)
}

fn linear_no_bias(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let w = bound.var(&format!("{prefix}.weight"))?;
    g.matmul(x, w)
}

fn norm(g: &mut Graph, bound: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
    let gamma = bound.var(&format!("{prefix}.gamma"))?;
    let beta = bound.var(&format!("{prefix}.beta"))?;
    g.layer_norm(x, gamma, beta)
}

fn in_context(err: Error, context: &str) -> Error {
    match err {
        Error::Numeric { op } => Error::Numeric {
            op: format!("{op} in {context}"),
        },
        other => other,
    }
}

/// Extractor output `T × D` as a graph node.
pub fn extract_features(
    g: &mut Graph,
    bound: &BoundParams,
    config: &EncoderConfig,
    input: &Tensor,
) -> Result<Var> {
    let run = |g: &mut Graph| -> Result<Var> {
        let h = match &config.input {
            InputKind::Frames { feature_dim } => {
                if input.rank() != 2 || input.cols() != *feature_dim {
                    return Err(Error::Dimension {
                        op: "extract_features",
                        lhs: input.shape().to_vec(),
                        rhs: vec![input.rows(), *feature_dim],
                    });
                }
                config.output_frames(input.rows())?;
                let x = g.constant(input.clone());
                linear(g, bound, "encoder.extractor.proj", x)?
            }
            InputKind::Signal { conv_layers } => {
                config.output_frames(input.len())?;
                let signal = input.clone().reshape(vec![input.len(), 1])?;
                let mut h = g.constant(signal);
                for (i, c) in conv_layers.iter().enumerate() {
                    let w = bound.var(&format!("encoder.extractor.conv.{i}.weight"))?;
                    let b = bound.var(&format!("encoder.extractor.conv.{i}.bias"))?;
                    let y = g.conv1d(h, w, b, c.stride)?;
                    h = g.gelu(y)?;
                }
                linear(g, bound, "encoder.extractor.proj", h)?
            }
        };
        norm(g, bound, "encoder.extractor.norm", h)
    };
    let h = run(g).map_err(|e| in_context(e, "feature extractor"))?;
    let t = g.value(h).rows();
    if t > config.max_frames {
        return Err(Error::Length(format!(
            "{t} frames exceed max_frames {}",
            config.max_frames
        )));
    }
    Ok(h)
}

fn self_attention(
    g: &mut Graph,
    bound: &BoundParams,
    config: &EncoderConfig,
    prefix: &str,
    x: Var,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let q = linear(g, bound, &format!("{prefix}.query"), x)?;
    let k = linear_no_bias(g, bound, &format!("{prefix}.key"), x)?;
    let v = linear(g, bound, &format!("{prefix}.value"), x)?;
    let head_dim = config.embed_dim / config.num_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut heads = Vec::with_capacity(config.num_heads);
    for h in 0..config.num_heads {
        let start = h * head_dim;
        let qh = g.slice_cols(q, start, head_dim)?;
        let kh = g.slice_cols(k, start, head_dim)?;
        let vh = g.slice_cols(v, start, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scores = g.scale(scores, scale)?;
        let attn = g.softmax_rows(scores, valid)?;
        heads.push(g.matmul(attn, vh)?);
    }
    let cat = g.concat_cols(&heads)?;
    linear(g, bound, &format!("{prefix}.output"), cat)
}

fn transformer_layer(
    g: &mut Graph,
    bound: &BoundParams,
    config: &EncoderConfig,
    layer: usize,
    h: Var,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let pre = format!("encoder.transformer.{layer}");
    let a = norm(g, bound, &format!("{pre}.attention_norm"), h)?;
    let a = self_attention(g, bound, config, &format!("{pre}.attention"), a, valid)?;
    let h = g.add(h, a)?;
    let f = norm(g, bound, &format!("{pre}.ffn_norm"), h)?;
    let f = linear(g, bound, &format!("{pre}.ffn.up"), f)?;
    let f = g.gelu(f)?;
    let f = linear(g, bound, &format!("{pre}.ffn.down"), f)?;
    g.add(h, f)
}

/// Graph nodes produced by one encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderVars {
    /// Output of transformer layer `i` at index `i − 1`.
    pub hidden: Vec<Var>,
    /// Final layer after the output norm; the representation the
    /// utterance-level heads consume.
    pub output: Var,
    pub logits: Option<Var>,
}

/// Full encoder pass on `g`.
///
/// `valid` flags real (non-padding) frames; padded frames are excluded as
/// attention keys. With `with_head` the cluster head logits are produced.
pub fn forward_graph(
    g: &mut Graph,
    bound: &BoundParams,
    config: &EncoderConfig,
    input: &Tensor,
    mask: Option<&MaskSpec>,
    valid: Option<&[bool]>,
    with_head: bool,
) -> Result<EncoderVars> {
    let mut h = extract_features(g, bound, config, input)?;
    let t = g.value(h).rows();
    if let Some(v) = valid {
        if v.len() != t {
            return Err(Error::Dimension {
                op: "validity mask",
                lhs: vec![t],
                rhs: vec![v.len()],
            });
        }
    }
    if let Some(mask) = mask {
        if mask.num_frames != t || mask.masked_indices.iter().any(|&i| i >= t) {
            return Err(Error::Input(format!(
                "mask built for {} frames applied to {t} frames",
                mask.num_frames
            )));
        }
        if !mask.is_empty() {
            let fill = bound.var(MASK_EMBEDDING)?;
            h = g.replace_rows(h, fill, &mask.flags())?;
        }
    }
    let pos = g.constant(sinusoidal_positions(t, config.embed_dim));
    h = g.add(h, pos)?;

    let mut hidden = Vec::with_capacity(config.num_transformer_layers);
    for layer in 0..config.num_transformer_layers {
        h = transformer_layer(g, bound, config, layer, h, valid)
            .map_err(|e| in_context(e, &format!("transformer layer {}", layer + 1)))?;
        hidden.push(h);
    }
    let output = norm(g, bound, "encoder.final_norm", h)
        .map_err(|e| in_context(e, "final norm"))?;
    let logits = if with_head {
        Some(linear(g, bound, "encoder.head.proj", output).map_err(|e| in_context(e, "cluster head"))?)
    } else {
        None
    };
    Ok(EncoderVars {
        hidden,
        output,
        logits,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden_states: Vec<Tensor>,
    pub output: Tensor,
    pub logits: Tensor,
}

/// Value-level encoder pass (no gradients).
pub fn forward(
    params: &ParamStore,
    config: &EncoderConfig,
    input: &Tensor,
    mask: Option<&MaskSpec>,
) -> Result<ForwardOutput> {
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let vars = forward_graph(&mut g, &bound, config, input, mask, None, true)?;
    Ok(ForwardOutput {
        hidden_states: vars.hidden.iter().map(|&v| g.value(v).clone()).collect(),
        output: g.value(vars.output).clone(),
        logits: g.value(vars.logits.expect("head requested")).clone(),
    })
}

/// Transformer layer to read embeddings from (1-based).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapSpec {
    pub layer_index: usize,
}

impl TapSpec {
    pub fn new(layer_index: usize, config: &EncoderConfig) -> Result<Self> {
        if layer_index < 1 || layer_index > config.num_transformer_layers {
            return Err(Error::Config(format!(
                "tap layer {layer_index} outside 1..={}",
                config.num_transformer_layers
            )));
        }
        Ok(Self { layer_index })
    }
}

/// Per-utterance frame embeddings from one transformer layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub tap: TapSpec,
    pub utterance_ids: Vec<String>,
    pub matrices: Vec<Tensor>,
}

impl LayerEmbeddings {
    pub fn total_frames(&self) -> usize {
        self.matrices.iter().map(Tensor::rows).sum()
    }

    /// All frames stacked in utterance order.
    pub fn concat(&self) -> Result<Tensor> {
        let parts: Vec<&Tensor> = self.matrices.iter().collect();
        Tensor::vstack(&parts)
    }
}

/// Unmasked forward passes, keeping the hidden state of the tapped layer.
pub fn layer_embeddings<'a, I>(
    utterances: I,
    params: &ParamStore,
    config: &EncoderConfig,
    tap: TapSpec,
) -> Result<LayerEmbeddings>
where
    I: IntoIterator<Item = &'a Utterance>,
{
    let tap = TapSpec::new(tap.layer_index, config)?;
    let mut out = LayerEmbeddings {
        tap,
        utterance_ids: Vec::new(),
        matrices: Vec::new(),
    };
    for u in utterances {
        let mut g = Graph::new();
        let bound = params.bind_frozen(&mut g);
        let vars = forward_graph(&mut g, &bound, config, &u.frames, None, None, false)?;
        out.utterance_ids.push(u.id.clone());
        out.matrices
            .push(g.value(vars.hidden[tap.layer_index - 1]).clone());
    }
    Ok(out)
}
