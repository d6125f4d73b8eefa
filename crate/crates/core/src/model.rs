//! Model assembly: configuration presets, parameter accounting, checkpoint
//! size estimation and the Pre-LN forward pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::{alternating_pattern, AttentionConfig, AttentionError, AttentionWeights, KvCache, YarnParams};
use crate::moe::{Expert, ExpertBiases, MoeConfig, MoeError, MoeWeights, Weight};
use crate::quant::{max_rounding_error, QuantizedTensor, BLOCK_BYTES, BLOCK_SIZE};
use crate::tensor::{self, rms_norm, SwigluParams, Tensor, TensorError};

pub const VOCAB_SIZE: usize = 201_088;
pub const D_MODEL: usize = 2880;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown preset {0:?} (expected gpt-oss-120b, gpt-oss-20b or toy)")]
    UnknownPreset(String),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("token id {token} at index {index} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { index: usize, token: u32, vocab: usize },
    #[error(transparent)]
    Attention(#[from] AttentionError),
    #[error(transparent)]
    Moe(#[from] MoeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub n_layers: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub norm_eps: f32,
    pub tie_embeddings: bool,
    pub attention: AttentionConfig,
    pub moe: MoeConfig,
}

fn full_scale(name: &str, n_layers: usize, n_experts: usize) -> ModelConfig {
    let head_dim = 64;
    let rope_theta = 150_000.0;
    ModelConfig {
        name: name.to_string(),
        n_layers,
        d_model: D_MODEL,
        vocab_size: VOCAB_SIZE,
        norm_eps: 1e-5,
        tie_embeddings: false,
        attention: AttentionConfig {
            n_query_heads: 64,
            n_kv_heads: 8,
            head_dim,
            bandwidth: 128,
            layer_pattern: alternating_pattern(n_layers),
            rope_theta,
            yarn: YarnParams::standard(32.0, 4096, head_dim, rope_theta),
            yarn_on_banded: false,
            max_context: 131_072,
        },
        moe: MoeConfig {
            n_experts,
            top_k: 4,
            d_model: D_MODEL,
            d_ff: 2880,
            swiglu: SwigluParams::default(),
            expert_bias: false,
            router_bias: false,
        },
    }
}

pub fn preset_config(name: &str) -> Result<ModelConfig> {
    match name {
        "gpt-oss-120b" => Ok(full_scale(name, 36, 128)),
        "gpt-oss-20b" => Ok(full_scale(name, 24, 32)),
        "toy" => {
            let head_dim = 16;
            let rope_theta = 150_000.0;
            Ok(ModelConfig {
                name: name.to_string(),
                n_layers: 2,
                d_model: 64,
                vocab_size: 512,
                norm_eps: 1e-5,
                tie_embeddings: false,
                attention: AttentionConfig {
                    n_query_heads: 4,
                    n_kv_heads: 2,
                    head_dim,
                    bandwidth: 128,
                    layer_pattern: alternating_pattern(2),
                    rope_theta,
                    yarn: YarnParams::standard(32.0, 4096, head_dim, rope_theta),
                    yarn_on_banded: false,
                    max_context: 131_072,
                },
                moe: MoeConfig {
                    n_experts: 8,
                    top_k: 2,
                    d_model: 64,
                    d_ff: 64,
                    swiglu: SwigluParams::default(),
                    expert_bias: false,
                    router_bias: false,
                },
            })
        }
        other => Err(ModelError::UnknownPreset(other.to_string())),
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(ModelError::Config("n_layers, d_model and vocab_size must be positive".into()));
        }
        if self.attention.layer_pattern.len() != self.n_layers {
            return Err(ModelError::Config(format!(
                "layer pattern has {} entries for {} layers",
                self.attention.layer_pattern.len(),
                self.n_layers
            )));
        }
        if self.moe.d_model != self.d_model {
            return Err(ModelError::Config(format!(
                "moe d_model {} differs from model d_model {}",
                self.moe.d_model, self.d_model
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(ModelError::Config("norm_eps must be positive".into()));
        }
        self.attention.validate()?;
        self.moe.validate()?;
        Ok(())
    }
}

/// Parameter totals by component. `active` counts the unembedding but not
/// the embedding, and only `top_k` experts per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub mlp_params: u64,
    pub attention_params: u64,
    pub embed_unembed_params: u64,
    pub active_params: u64,
    pub total_params: u64,
}

struct LayerCounts {
    attention: u64,
    router: u64,
    per_expert: u64,
    expert_matrices: u64,
}

fn layer_counts(cfg: &ModelConfig) -> LayerCounts {
    let d = cfg.d_model as u64;
    let a = &cfg.attention;
    let q = a.q_dim() as u64;
    let kv = a.kv_dim() as u64;
    let attention = d * q + 2 * d * kv + q * d + a.n_query_heads as u64 + 2 * d;
    let m = &cfg.moe;
    let ff = m.d_ff as u64;
    let e = m.n_experts as u64;
    let expert_matrices = 3 * d * ff;
    let per_expert = expert_matrices + if m.expert_bias { 2 * ff + d } else { 0 };
    let router = d * e + if m.router_bias { e } else { 0 };
    LayerCounts {
        attention,
        router,
        per_expert,
        expert_matrices,
    }
}

pub fn count_parameters(cfg: &ModelConfig) -> ParamReport {
    let l = cfg.n_layers as u64;
    let c = layer_counts(cfg);
    let e = cfg.moe.n_experts as u64;
    let k = cfg.moe.top_k as u64;
    let d = cfg.d_model as u64;
    let table = cfg.vocab_size as u64 * d;

    let mlp = l * (e * c.per_expert + c.router);
    // Final norm gain lives in the attention bucket alongside the per-layer norms.
    let attention = l * c.attention + d;
    let embed_unembed = if cfg.tie_embeddings { table } else { 2 * table };
    let active = attention + table + l * (k * c.per_expert + c.router);
    ParamReport {
        mlp_params: mlp,
        attention_params: attention,
        embed_unembed_params: embed_unembed,
        active_params: active,
        total_params: mlp + attention + embed_unembed,
    }
}

/// Elements stored in expert gate/linear/down matrices (the MXFP4 part).
pub fn expert_matrix_params(cfg: &ModelConfig) -> u64 {
    cfg.n_layers as u64 * cfg.moe.n_experts as u64 * layer_counts(cfg).expert_matrices
}

/// Bytes for expert matrices in MXFP4 plus everything else at 16 bits.
pub fn estimate_checkpoint_size(cfg: &ModelConfig) -> u64 {
    let per_matrix = |numel: u64| numel.div_ceil(BLOCK_SIZE as u64) * BLOCK_BYTES as u64;
    let d = cfg.d_model as u64;
    let ff = cfg.moe.d_ff as u64;
    let n_matrices = cfg.n_layers as u64 * cfg.moe.n_experts as u64;
    let quantized = n_matrices * 3 * per_matrix(d * ff);
    let rest = count_parameters(cfg).total_params - expert_matrix_params(cfg);
    quantized + 2 * rest
}

/// Bytes if every parameter were stored at 16 bits.
pub fn unquantized_checkpoint_size(cfg: &ModelConfig) -> u64 {
    2 * count_parameters(cfg).total_params
}

pub const GIB: f64 = (1u64 << 30) as f64;

/// Outcome of quantizing a model's expert matrices.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct QuantReport {
    pub tensors: usize,
    pub params: u64,
    pub stored_bits: u64,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
    /// Worst element error divided by its block's rounding bound (at most 1).
    pub worst_bound_ratio: f64,
}

impl QuantReport {
    pub fn bits_per_param(&self) -> f64 {
        if self.params == 0 {
            0.0
        } else {
            self.stored_bits as f64 / self.params as f64
        }
    }
}

/// Published component counts for the two released presets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceCounts {
    pub mlp: f64,
    pub attention: f64,
    pub embed_unembed: f64,
    pub active: f64,
    pub total: f64,
    pub checkpoint_gib: f64,
}

pub fn reference_counts(name: &str) -> Option<ReferenceCounts> {
    match name {
        "gpt-oss-120b" => Some(ReferenceCounts {
            mlp: 114.71e9,
            attention: 0.96e9,
            embed_unembed: 1.16e9,
            active: 5.13e9,
            total: 116.83e9,
            checkpoint_gib: 60.8,
        }),
        "gpt-oss-20b" => Some(ReferenceCounts {
            mlp: 19.12e9,
            attention: 0.64e9,
            embed_unembed: 1.16e9,
            active: 3.61e9,
            total: 20.91e9,
            checkpoint_gib: 12.8,
        }),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub attn_norm: Vec<f32>,
    pub attention: AttentionWeights,
    pub moe_norm: Vec<f32>,
    pub moe: MoeWeights,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// `[vocab, d_model]`
    pub embed: Tensor,
    pub layers: Vec<Layer>,
    pub final_norm: Vec<f32>,
    /// `[vocab, d_model]`; `None` when tied to `embed`.
    pub unembed: Option<Tensor>,
}

/// Borrowed view of one named parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum TensorView<'a> {
    F32 { shape: [usize; 2], data: &'a [f32] },
    Vector(&'a [f32]),
    Mxfp4(&'a QuantizedTensor),
}

impl TensorView<'_> {
    pub fn numel(&self) -> usize {
        match self {
            TensorView::F32 { data, .. } => data.len(),
            TensorView::Vector(v) => v.len(),
            TensorView::Mxfp4(q) => q.numel(),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        match self {
            TensorView::F32 { shape, .. } => shape.to_vec(),
            TensorView::Vector(v) => vec![v.len()],
            TensorView::Mxfp4(q) => q.shape().to_vec(),
        }
    }
}

fn matrix_view(t: &Tensor) -> TensorView<'_> {
    let s = t.shape();
    TensorView::F32 {
        shape: [s[0], s[1]],
        data: t.data(),
    }
}

fn weight_view(w: &Weight) -> TensorView<'_> {
    match w {
        Weight::Dense(t) => matrix_view(t),
        Weight::Mxfp4(q) => TensorView::Mxfp4(q),
    }
}

pub fn expert_tensor_name(layer: usize, expert: usize, part: &str) -> String {
    format!("layers.{layer}.moe.expert.{expert}.{part}")
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn uniform(&mut self, n: usize, bound: f32) -> Vec<f32> {
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Tensor {
        let bound = 1.0 / (rows as f32).sqrt();
        Tensor::from_vec(&[rows, cols], self.uniform(rows * cols, bound)).unwrap()
    }
}

impl Model {
    /// Deterministic random weights: uniform `±1/sqrt(fan_in)` matrices,
    /// unit norm gains, zero sinks and biases, drawn from ChaCha8 seeded
    /// with `seed`.
    pub fn init_random(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let d = config.d_model;
        let a = &config.attention;
        let m = &config.moe;
        let embed = Tensor::from_vec(&[config.vocab_size, d], init.uniform(config.vocab_size * d, 1.0))?;
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let attention = AttentionWeights {
                wq: init.matrix(d, a.q_dim()),
                wk: init.matrix(d, a.kv_dim()),
                wv: init.matrix(d, a.kv_dim()),
                wo: init.matrix(a.q_dim(), d),
                sinks: vec![0.0; a.n_query_heads],
            };
            let router = init.matrix(d, m.n_experts);
            let experts = (0..m.n_experts)
                .map(|_| Expert {
                    gate: Weight::Dense(init.matrix(d, m.d_ff)),
                    lin: Weight::Dense(init.matrix(d, m.d_ff)),
                    down: Weight::Dense(init.matrix(m.d_ff, d)),
                    biases: m.expert_bias.then(|| ExpertBiases {
                        gate: vec![0.0; m.d_ff],
                        lin: vec![0.0; m.d_ff],
                        down: vec![0.0; d],
                    }),
                })
                .collect();
            layers.push(Layer {
                attn_norm: vec![1.0; d],
                attention,
                moe_norm: vec![1.0; d],
                moe: MoeWeights {
                    router,
                    router_bias: m.router_bias.then(|| vec![0.0; m.n_experts]),
                    experts,
                },
            });
        }
        let unembed = (!config.tie_embeddings).then(|| init.matrix(config.vocab_size, d));
        Ok(Self {
            config: config.clone(),
            embed,
            layers,
            final_norm: vec![1.0; d],
            unembed,
        })
    }

    /// Every parameter tensor with its canonical name, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(String, TensorView<'_>)> {
        let mut out = vec![("embed".to_string(), matrix_view(&self.embed))];
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            out.push((format!("{p}.attn_norm"), TensorView::Vector(&layer.attn_norm)));
            out.push((format!("{p}.attn.q"), matrix_view(&layer.attention.wq)));
            out.push((format!("{p}.attn.k"), matrix_view(&layer.attention.wk)));
            out.push((format!("{p}.attn.v"), matrix_view(&layer.attention.wv)));
            out.push((format!("{p}.attn.o"), matrix_view(&layer.attention.wo)));
            out.push((format!("{p}.attn.sinks"), TensorView::Vector(&layer.attention.sinks)));
            out.push((format!("{p}.moe_norm"), TensorView::Vector(&layer.moe_norm)));
            out.push((format!("{p}.moe.router"), matrix_view(&layer.moe.router)));
            if let Some(b) = &layer.moe.router_bias {
                out.push((format!("{p}.moe.router_bias"), TensorView::Vector(b)));
            }
            for (e, ex) in layer.moe.experts.iter().enumerate() {
                out.push((expert_tensor_name(l, e, "gate"), weight_view(&ex.gate)));
                out.push((expert_tensor_name(l, e, "lin"), weight_view(&ex.lin)));
                out.push((expert_tensor_name(l, e, "down"), weight_view(&ex.down)));
                if let Some(b) = &ex.biases {
                    out.push((expert_tensor_name(l, e, "gate_bias"), TensorView::Vector(&b.gate)));
                    out.push((expert_tensor_name(l, e, "lin_bias"), TensorView::Vector(&b.lin)));
                    out.push((expert_tensor_name(l, e, "down_bias"), TensorView::Vector(&b.down)));
                }
            }
        }
        out.push(("final_norm".to_string(), TensorView::Vector(&self.final_norm)));
        if let Some(u) = &self.unembed {
            out.push(("unembed".to_string(), matrix_view(u)));
        }
        out
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = &self.config;
        c.validate()?;
        let d = c.d_model;
        if self.embed.shape() != [c.vocab_size, d] {
            return Err(ModelError::Config(format!("embed shape {:?}", self.embed.shape())));
        }
        if self.layers.len() != c.n_layers || self.final_norm.len() != d {
            return Err(ModelError::Config("layer count or final norm size mismatch".into()));
        }
        if self.unembed.is_some() == c.tie_embeddings {
            return Err(ModelError::Config("unembedding presence disagrees with tie_embeddings".into()));
        }
        if let Some(u) = &self.unembed {
            if u.shape() != [c.vocab_size, d] {
                return Err(ModelError::Config(format!("unembed shape {:?}", u.shape())));
            }
        }
        for layer in &self.layers {
            if layer.attn_norm.len() != d || layer.moe_norm.len() != d {
                return Err(ModelError::Config("norm gain size mismatch".into()));
            }
            layer.attention.check_shapes(&c.attention, d)?;
            layer.moe.check_shapes(&c.moe)?;
        }
        Ok(())
    }

    pub fn quantize_experts(&mut self) -> Result<()> {
        for l in &mut self.layers {
            l.moe.quantize_experts()?;
        }
        Ok(())
    }

    /// Quantize expert matrices and measure what the codec lost.
    pub fn quantize_experts_report(&mut self) -> Result<QuantReport> {
        let mut r = QuantReport::default();
        let mut abs_sum = 0.0;
        for l in &mut self.layers {
            for e in &mut l.moe.experts {
                for w in [&mut e.gate, &mut e.lin, &mut e.down] {
                    let Weight::Dense(t) = w else {
                        continue;
                    };
                    let q = QuantizedTensor::quantize(t).map_err(MoeError::from)?;
                    let back = q.dequantize();
                    for (i, (a, b)) in t.data().iter().zip(back.data()).enumerate() {
                        let err = (f64::from(*a) - f64::from(*b)).abs();
                        let bound = max_rounding_error(q.blocks()[i / BLOCK_SIZE].scale_exp);
                        abs_sum += err;
                        r.max_abs_error = r.max_abs_error.max(err);
                        if bound > 0.0 {
                            r.worst_bound_ratio = r.worst_bound_ratio.max(err / bound);
                        }
                    }
                    r.tensors += 1;
                    r.params += q.numel() as u64;
                    r.stored_bits += q.stored_bits();
                    *w = Weight::Mxfp4(q);
                }
            }
        }
        if r.params > 0 {
            r.mean_abs_error = abs_sum / r.params as f64;
        }
        Ok(r)
    }

    pub fn dequantize_experts(&mut self) {
        for l in &mut self.layers {
            l.moe.dequantize_experts();
        }
    }

    pub fn has_quantized_experts(&self) -> bool {
        self.layers
            .iter()
            .flat_map(|l| &l.moe.experts)
            .any(|e| e.gate.is_quantized() || e.lin.is_quantized() || e.down.is_quantized())
    }

    fn embed_tokens(&self, tokens: &[u32]) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (index, &t) in tokens.iter().enumerate() {
            if t as usize >= self.config.vocab_size {
                return Err(ModelError::TokenOutOfRange {
                    index,
                    token: t,
                    vocab: self.config.vocab_size,
                });
            }
            data.extend_from_slice(self.embed.row(t as usize));
        }
        Ok(Tensor::from_vec(&[tokens.len(), d], data)?)
    }

    fn add_moe(&self, layer: &Layer, x: &mut Tensor) -> Result<()> {
        let d = self.config.d_model;
        let h = rms_norm(x, &layer.moe_norm, self.config.norm_eps)?;
        for (i, row) in h.rows().enumerate() {
            let y = layer.moe.forward(row, &self.config.moe)?;
            for (xv, yv) in x.data_mut()[i * d..(i + 1) * d].iter_mut().zip(y) {
                *xv += yv;
            }
        }
        Ok(())
    }

    fn unembed_rows(&self, x: &Tensor) -> Result<Tensor> {
        let h = rms_norm(x, &self.final_norm, self.config.norm_eps)?;
        let table = self.unembed.as_ref().unwrap_or(&self.embed);
        let vocab = self.config.vocab_size;
        let mut logits = Vec::with_capacity(h.shape()[0] * vocab);
        for row in h.rows() {
            logits.extend(table.rows().map(|u| tensor::dot(row, u) as f32));
        }
        Ok(Tensor::from_vec(&[h.shape()[0], vocab], logits)?)
    }

    /// Incremental forward: tokens occupy the positions after whatever
    /// `cache` already holds. Returns `[seq, vocab]` logits.
    pub fn forward(&self, tokens: &[u32], cache: &mut KvCache) -> Result<Tensor> {
        let mut x = self.embed_tokens(tokens)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &layer.attn_norm, self.config.norm_eps)?;
            let a = layer
                .attention
                .forward_cached(&self.config.attention, l, &h, cache.layer_mut(l))?;
            for (xv, av) in x.data_mut().iter_mut().zip(a.data()) {
                *xv += av;
            }
            self.add_moe(layer, &mut x)?;
        }
        self.unembed_rows(&x)
    }

    /// Whole-sequence forward from position 0 without a cache.
    pub fn forward_full(&self, tokens: &[u32]) -> Result<Tensor> {
        let mut x = self.embed_tokens(tokens)?;
        for (l, layer) in self.layers.iter().enumerate() {
            let h = rms_norm(&x, &layer.attn_norm, self.config.norm_eps)?;
            let (a, _) = layer.attention.forward_full(&self.config.attention, l, &h)?;
            for (xv, av) in x.data_mut().iter_mut().zip(a.data()) {
                *xv += av;
            }
            self.add_moe(layer, &mut x)?;
        }
        self.unembed_rows(&x)
    }

    pub fn new_cache(&self) -> KvCache {
        KvCache::new(&self.config.attention)
    }
}
