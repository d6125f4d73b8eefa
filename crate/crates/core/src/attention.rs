//! Grouped-query causal attention with rotary embeddings, YaRN frequency
//! scaling, alternating banded/dense layers and a learned per-head sink term
//! in the softmax denominator.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{self, softmax_with_sink, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AttentionError {
    #[error("invalid attention config: {0}")]
    Config(String),
    #[error("cache position regression: last stored position {last}, got {got}")]
    PositionRegression { last: usize, got: usize },
    #[error("position {position} exceeds max context {max_context}")]
    ContextOverflow { position: usize, max_context: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, AttentionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Banded,
    Dense,
}

/// Layer 0 banded, then strict alternation.
pub fn alternating_pattern(n_layers: usize) -> Vec<LayerKind> {
    (0..n_layers)
        .map(|i| if i % 2 == 0 { LayerKind::Banded } else { LayerKind::Dense })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct YarnParams {
    pub scale_factor: f64,
    pub original_context: usize,
    /// Multiplies both q and k, so attention logits scale by its square.
    pub attn_temperature: f64,
    /// Pair indices below `ramp_low` keep their frequency.
    pub ramp_low: f64,
    /// Pair indices at or above `ramp_high` are fully interpolated.
    pub ramp_high: f64,
}

impl YarnParams {
    const BETA_FAST: f64 = 32.0;
    const BETA_SLOW: f64 = 1.0;

    /// Ramp bounds from the usual `beta = (32, 1)` rotation counts and
    /// temperature `1 + 0.1 ln(scale)`.
    pub fn standard(scale_factor: f64, original_context: usize, head_dim: usize, rope_theta: f64) -> Self {
        let correction_dim = |rotations: f64| {
            head_dim as f64 * (original_context as f64 / (rotations * 2.0 * PI)).ln() / (2.0 * rope_theta.ln())
        };
        let half = (head_dim / 2) as f64;
        let low = correction_dim(Self::BETA_FAST).floor().clamp(0.0, half - 1.0);
        let mut high = correction_dim(Self::BETA_SLOW).ceil().clamp(0.0, half - 1.0);
        if high <= low {
            high = low + 1.0;
        }
        Self {
            scale_factor,
            original_context,
            attn_temperature: 1.0 + 0.1 * scale_factor.ln(),
            ramp_low: low,
            ramp_high: high,
        }
    }

    pub fn extended_context(&self) -> usize {
        (self.scale_factor * self.original_context as f64).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.scale_factor >= 1.0) {
            return Err(AttentionError::Config(format!(
                "yarn scale factor must be >= 1, got {}",
                self.scale_factor
            )));
        }
        if !(self.ramp_low < self.ramp_high) {
            return Err(AttentionError::Config(format!(
                "yarn ramp_low {} must be below ramp_high {}",
                self.ramp_low, self.ramp_high
            )));
        }
        if !(self.attn_temperature > 0.0) {
            return Err(AttentionError::Config("yarn attention temperature must be positive".into()));
        }
        Ok(())
    }
}

/// Blend each pair frequency between its original value (index below
/// `ramp_low`) and `theta / scale_factor` (index at or above `ramp_high`).
pub fn yarn_scale_frequencies(theta: &[f64], yarn: &YarnParams) -> Vec<f64> {
    theta
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let ramp = ((i as f64 - yarn.ramp_low) / (yarn.ramp_high - yarn.ramp_low)).clamp(0.0, 1.0);
            let scaled = t / yarn.scale_factor;
            if ramp >= 1.0 {
                scaled
            } else {
                t + ramp * (scaled - t)
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub n_query_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub bandwidth: usize,
    pub layer_pattern: Vec<LayerKind>,
    pub rope_theta: f64,
    pub yarn: YarnParams,
    /// Apply YaRN to banded layers as well as dense ones.
    pub yarn_on_banded: bool,
    pub max_context: usize,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_query_heads == 0 || self.n_kv_heads == 0 || self.head_dim == 0 {
            return Err(AttentionError::Config("head counts and head_dim must be positive".into()));
        }
        if self.n_query_heads % self.n_kv_heads != 0 {
            return Err(AttentionError::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_query_heads, self.n_kv_heads
            )));
        }
        if self.head_dim % 2 != 0 {
            return Err(AttentionError::Config(format!("head_dim {} must be even for RoPE", self.head_dim)));
        }
        if self.bandwidth == 0 || self.max_context == 0 {
            return Err(AttentionError::Config("bandwidth and max_context must be >= 1".into()));
        }
        if !(self.rope_theta > 0.0) {
            return Err(AttentionError::Config("rope_theta must be positive".into()));
        }
        self.yarn.validate()
    }

    pub fn group_size(&self) -> usize {
        self.n_query_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_query_heads * self.head_dim
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn layer_kind(&self, layer: usize) -> LayerKind {
        self.layer_pattern[layer]
    }

    fn uses_yarn(&self, kind: LayerKind) -> bool {
        kind == LayerKind::Dense || self.yarn_on_banded
    }

    /// `rope_theta^(-2i/head_dim)` for each rotation pair.
    pub fn base_frequencies(&self) -> Vec<f64> {
        (0..self.head_dim / 2)
            .map(|i| self.rope_theta.powf(-2.0 * i as f64 / self.head_dim as f64))
            .collect()
    }

    pub fn frequencies(&self, kind: LayerKind) -> Vec<f64> {
        let base = self.base_frequencies();
        if self.uses_yarn(kind) {
            yarn_scale_frequencies(&base, &self.yarn)
        } else {
            base
        }
    }

    /// Multiplier on `q·k / sqrt(head_dim)`.
    pub fn logit_scale(&self, kind: LayerKind) -> f64 {
        let temperature = if self.uses_yarn(kind) { self.yarn.attn_temperature } else { 1.0 };
        temperature * temperature / (self.head_dim as f64).sqrt()
    }
}

/// Rotate consecutive pairs `(v[2i], v[2i+1])` by `position * freqs[i]`.
pub fn rotate_pairs(vec: &[f32], position: usize, freqs: &[f64]) -> Vec<f32> {
    let mut out = Vec::with_capacity(vec.len());
    for (pair, &f) in vec.chunks_exact(2).zip(freqs) {
        let angle = position as f64 * f;
        let (sin, cos) = angle.sin_cos();
        let (x, y) = (pair[0] as f64, pair[1] as f64);
        out.push((x * cos - y * sin) as f32);
        out.push((x * sin + y * cos) as f32);
    }
    out
}

pub fn rope_apply(vec: &[f32], position: usize, cfg: &AttentionConfig, kind: LayerKind) -> Result<Vec<f32>> {
    if cfg.head_dim % 2 != 0 {
        return Err(AttentionError::Config(format!("head_dim {} must be even for RoPE", cfg.head_dim)));
    }
    if vec.len() != cfg.head_dim {
        return Err(TensorError::ShapeMismatch {
            op: "rope_apply",
            left: vec![vec.len()],
            right: vec![cfg.head_dim],
        }
        .into());
    }
    Ok(rotate_pairs(vec, position, &cfg.frequencies(kind)))
}

pub fn mask_allows(query_pos: usize, key_pos: usize, kind: LayerKind, bandwidth: usize) -> bool {
    if key_pos > query_pos {
        return false;
    }
    match kind {
        LayerKind::Dense => true,
        LayerKind::Banded => query_pos - key_pos < bandwidth,
    }
}

#[derive(Debug, Clone, PartialEq)]
struct CacheEntry {
    position: usize,
    key: Vec<f32>,
    value: Vec<f32>,
}

/// Keys and values for one layer. Banded layers keep at most `bandwidth`
/// entries; dense layers keep everything up to `max_context`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCache {
    kind: LayerKind,
    bandwidth: usize,
    max_context: usize,
    entries: VecDeque<CacheEntry>,
    next_position: usize,
}

impl LayerCache {
    pub fn new(kind: LayerKind, bandwidth: usize, max_context: usize) -> Self {
        Self {
            kind,
            bandwidth,
            max_context,
            entries: VecDeque::new(),
            next_position: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    pub fn positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.iter().map(|e| e.position)
    }

    pub fn append(&mut self, position: usize, key: Vec<f32>, value: Vec<f32>) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if position <= last.position {
                return Err(AttentionError::PositionRegression {
                    last: last.position,
                    got: position,
                });
            }
        } else if position < self.next_position {
            return Err(AttentionError::PositionRegression {
                last: self.next_position - 1,
                got: position,
            });
        }
        if position >= self.max_context {
            return Err(AttentionError::ContextOverflow {
                position,
                max_context: self.max_context,
            });
        }
        self.entries.push_back(CacheEntry { position, key, value });
        if self.kind == LayerKind::Banded {
            while self
                .entries
                .front()
                .is_some_and(|e| position - e.position >= self.bandwidth)
            {
                self.entries.pop_front();
            }
        }
        self.next_position = position + 1;
        Ok(())
    }
}

/// Per-session store of every layer's keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
}

impl KvCache {
    pub fn new(cfg: &AttentionConfig) -> Self {
        Self {
            layers: cfg
                .layer_pattern
                .iter()
                .map(|&k| LayerCache::new(k, cfg.bandwidth, cfg.max_context))
                .collect(),
        }
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Position the next token will occupy.
    pub fn position(&self) -> usize {
        self.layers.first().map_or(0, |l| l.next_position)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights {
    /// `[d_model, n_query_heads * head_dim]`
    pub wq: Tensor,
    /// `[d_model, n_kv_heads * head_dim]`
    pub wk: Tensor,
    pub wv: Tensor,
    /// `[n_query_heads * head_dim, d_model]`
    pub wo: Tensor,
    /// One sink logit per query head.
    pub sinks: Vec<f32>,
}

impl AttentionWeights {
    pub fn check_shapes(&self, cfg: &AttentionConfig, d_model: usize) -> Result<()> {
        let expect = [
            (&self.wq, [d_model, cfg.q_dim()]),
            (&self.wk, [d_model, cfg.kv_dim()]),
            (&self.wv, [d_model, cfg.kv_dim()]),
            (&self.wo, [cfg.q_dim(), d_model]),
        ];
        for (t, shape) in expect {
            if t.shape() != shape {
                return Err(AttentionError::Config(format!(
                    "attention weight shape {:?}, expected {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if self.sinks.len() != cfg.n_query_heads {
            return Err(AttentionError::Config(format!(
                "{} sink biases for {} query heads",
                self.sinks.len(),
                cfg.n_query_heads
            )));
        }
        Ok(())
    }

    fn project(&self, x: &[f32], cfg: &AttentionConfig, position: usize, freqs: &[f64]) -> Result<Projected> {
        let hd = cfg.head_dim;
        let q = tensor::vecmat(x, &self.wq)?;
        let k = tensor::vecmat(x, &self.wk)?;
        let v = tensor::vecmat(x, &self.wv)?;
        let q = q.chunks_exact(hd).flat_map(|h| rotate_pairs(h, position, freqs)).collect();
        let k = k.chunks_exact(hd).flat_map(|h| rotate_pairs(h, position, freqs)).collect();
        Ok(Projected { q, k, v })
    }

    /// Attend one query (all heads) over `keys`, returning the output row
    /// after `Wo` and each head's weights over the given keys.
    fn attend<'k>(
        &self,
        cfg: &AttentionConfig,
        kind: LayerKind,
        query_pos: usize,
        q: &[f32],
        keys: impl Iterator<Item = (usize, &'k [f32], &'k [f32])> + Clone,
    ) -> Result<(Vec<f32>, Vec<Vec<f32>>)> {
        let hd = cfg.head_dim;
        let group = cfg.group_size();
        let scale = cfg.logit_scale(kind);
        let mut heads_out = vec![0.0f32; cfg.q_dim()];
        let mut all_weights = Vec::with_capacity(cfg.n_query_heads);
        for h in 0..cfg.n_query_heads {
            let kv = h / group;
            let qh = &q[h * hd..(h + 1) * hd];
            let mut scores = Vec::new();
            let mut mask = Vec::new();
            for (pos, key, _) in keys.clone() {
                let kh = &key[kv * hd..(kv + 1) * hd];
                scores.push((tensor::dot(qh, kh) * scale) as f32);
                mask.push(mask_allows(query_pos, pos, kind, cfg.bandwidth));
            }
            let weights = softmax_with_sink(&scores, self.sinks[h], &mask)?;
            let mut acc = vec![0.0f64; hd];
            for (&w, (_, _, value)) in weights.iter().zip(keys.clone()) {
                if w == 0.0 {
                    continue;
                }
                let vh = &value[kv * hd..(kv + 1) * hd];
                for (a, &vv) in acc.iter_mut().zip(vh) {
                    *a += w as f64 * vv as f64;
                }
            }
            for (o, a) in heads_out[h * hd..(h + 1) * hd].iter_mut().zip(acc) {
                *o = a as f32;
            }
            all_weights.push(weights);
        }
        let out = tensor::vecmat(&heads_out, &self.wo)?;
        Ok((out, all_weights))
    }

    /// Incremental attention: each row of `x` is appended to `cache` at the
    /// next position and attends over what the cache holds.
    pub fn forward_cached(
        &self,
        cfg: &AttentionConfig,
        layer: usize,
        x: &Tensor,
        cache: &mut LayerCache,
    ) -> Result<Tensor> {
        let kind = cfg.layer_kind(layer);
        let freqs = cfg.frequencies(kind);
        let mut out = Vec::with_capacity(x.numel());
        for row in x.rows() {
            let pos = cache.next_position();
            let p = self.project(row, cfg, pos, &freqs)?;
            cache.append(pos, p.k, p.v)?;
            let keys = cache
                .entries
                .iter()
                .map(|e| (e.position, e.key.as_slice(), e.value.as_slice()));
            let (o, _) = self.attend(cfg, kind, pos, &p.q, keys)?;
            out.extend(o);
        }
        Ok(Tensor::from_vec(x.shape(), out)?)
    }

    /// One-pass attention over positions `0..seq` with explicit masks and no
    /// cache. Also returns `weights[head][query][key]`.
    pub fn forward_full(&self, cfg: &AttentionConfig, layer: usize, x: &Tensor) -> Result<(Tensor, Vec<Vec<Vec<f32>>>)> {
        let kind = cfg.layer_kind(layer);
        let freqs = cfg.frequencies(kind);
        let projected: Vec<Projected> = x
            .rows()
            .enumerate()
            .map(|(pos, row)| self.project(row, cfg, pos, &freqs))
            .collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(x.numel());
        let mut probs = vec![Vec::with_capacity(projected.len()); cfg.n_query_heads];
        for (i, p) in projected.iter().enumerate() {
            let keys = projected
                .iter()
                .enumerate()
                .map(|(j, pj)| (j, pj.k.as_slice(), pj.v.as_slice()));
            let (o, w) = self.attend(cfg, kind, i, &p.q, keys)?;
            out.extend(o);
            for (h, wh) in w.into_iter().enumerate() {
                probs[h].push(wh);
            }
        }
        Ok((Tensor::from_vec(x.shape(), out)?, probs))
    }
}

struct Projected {
    q: Vec<f32>,
    k: Vec<f32>,
    v: Vec<f32>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_cfg(n_q: usize, n_kv: usize, hd: usize, pattern: Vec<LayerKind>, bandwidth: usize) -> AttentionConfig {
        AttentionConfig {
            n_query_heads: n_q,
            n_kv_heads: n_kv,
            head_dim: hd,
            bandwidth,
            layer_pattern: pattern,
            rope_theta: 10_000.0,
            yarn: YarnParams::standard(1.0, 4096, hd, 10_000.0),
            yarn_on_banded: false,
            max_context: 1 << 17,
        }
    }

    #[test]
    fn standard_yarn_ramps_for_head_dim_64() {
        let y = YarnParams::standard(32.0, 4096, 64, 150_000.0);
        assert_eq!((y.ramp_low, y.ramp_high), (8.0, 18.0));
        assert_eq!(y.extended_context(), 131_072);
        assert!((y.attn_temperature - (1.0 + 0.1 * 32f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn yarn_examples() {
        let theta: Vec<f64> = (0..8).map(|i| 1.0 / (i as f64 + 1.0)).collect();
        let mut y = YarnParams::standard(1.0, 4096, 16, 10_000.0);
        assert_eq!(yarn_scale_frequencies(&theta, &y), theta);
        y.scale_factor = 32.0;
        y.ramp_low = 2.0;
        y.ramp_high = 6.0;
        let s = yarn_scale_frequencies(&theta, &y);
        assert_eq!(s[0], theta[0]);
        assert_eq!(s[7], theta[7] / 32.0);
        assert_eq!(s[6], theta[6] / 32.0);
        assert!((s[4] - theta[4] * (1.0 + 1.0 / 32.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn rope_examples() {
        let cfg = toy_cfg(1, 1, 4, vec![LayerKind::Banded], 128);
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(rope_apply(&v, 0, &cfg, LayerKind::Banded).unwrap(), v.to_vec());
        let r = rotate_pairs(&[3.0, 5.0], 1, &[std::f64::consts::FRAC_PI_2]);
        assert!((r[0] + 5.0).abs() < 1e-6 && (r[1] - 3.0).abs() < 1e-6);
        let mut odd = cfg.clone();
        odd.head_dim = 3;
        assert!(matches!(rope_apply(&[1.0; 3], 1, &odd, LayerKind::Dense), Err(AttentionError::Config(_))));
    }

    #[test]
    fn mask_examples() {
        assert!(!mask_allows(200, 50, LayerKind::Banded, 128));
        assert!(mask_allows(200, 100, LayerKind::Banded, 128));
        assert!(!mask_allows(200, 72, LayerKind::Banded, 128));
        assert!(mask_allows(200, 73, LayerKind::Banded, 128));
        assert!(mask_allows(200, 0, LayerKind::Dense, 128));
        assert!(!mask_allows(3, 4, LayerKind::Dense, 128));
        assert!(!mask_allows(3, 4, LayerKind::Banded, 128));
    }

    #[test]
    fn cache_rejects_regression_and_evicts_band() {
        let mut c = LayerCache::new(LayerKind::Banded, 3, 100);
        for p in 0..10 {
            c.append(p, vec![0.0], vec![0.0]).unwrap();
            assert!(c.len() <= 3);
        }
        assert_eq!(c.positions().collect::<Vec<_>>(), vec![7, 8, 9]);
        assert_eq!(
            c.append(9, vec![0.0], vec![0.0]),
            Err(AttentionError::PositionRegression { last: 9, got: 9 })
        );
        let mut d = LayerCache::new(LayerKind::Dense, 3, 4);
        for p in 0..4 {
            d.append(p, vec![], vec![]).unwrap();
        }
        assert_eq!(d.len(), 4);
        assert!(matches!(d.append(4, vec![], vec![]), Err(AttentionError::ContextOverflow { .. })));
    }

    #[test]
    fn config_validation() {
        let mut cfg = toy_cfg(4, 3, 4, vec![LayerKind::Dense], 8);
        assert!(cfg.validate().is_err());
        cfg.n_kv_heads = 2;
        assert!(cfg.validate().is_ok());
        cfg.bandwidth = 0;
        assert!(cfg.validate().is_err());
    }

    fn single_token_weights(d: usize, cfg: &AttentionConfig, sink: f32) -> AttentionWeights {
        let fill = |r: usize, c: usize, s: f32| {
            Tensor::from_vec(&[r, c], (0..r * c).map(|i| ((i % 7) as f32 - 3.0) * s).collect()).unwrap()
        };
        AttentionWeights {
            wq: fill(d, cfg.q_dim(), 0.1),
            wk: fill(d, cfg.kv_dim(), 0.2),
            wv: fill(d, cfg.kv_dim(), 0.3),
            wo: fill(cfg.q_dim(), d, 0.05),
            sinks: vec![sink; cfg.n_query_heads],
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = toy_cfg(2, 1, 2, vec![LayerKind::Dense], 8);
        let w = single_token_weights(3, &cfg, f32::NEG_INFINITY);
        let x = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        let (out, probs) = w.forward_full(&cfg, 0, &x).unwrap();
        assert!(probs.iter().all(|h| h[0] == vec![1.0]));
        // Expected: Wo · (v replicated over the query group).
        let v = tensor::vecmat(x.data(), &w.wv).unwrap();
        let heads: Vec<f32> = (0..cfg.n_query_heads).flat_map(|_| v.clone()).collect();
        assert_eq!(out.data(), tensor::vecmat(&heads, &w.wo).unwrap().as_slice());
    }

    #[test]
    fn infinite_sink_silences_head() {
        let cfg = toy_cfg(2, 1, 2, vec![LayerKind::Dense], 8);
        let w = single_token_weights(3, &cfg, f32::INFINITY);
        let x = Tensor::from_vec(&[2, 3], vec![0.5, -1.0, 2.0, 1.0, 1.0, 1.0]).unwrap();
        let (out, _) = w.forward_full(&cfg, 0, &x).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }
}
