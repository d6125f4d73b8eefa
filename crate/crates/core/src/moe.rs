//! Mixture-of-experts feed-forward block: linear router, top-k selection,
//! softmax over the selected logits only, clamped SwiGLU experts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{QuantError, QuantizedTensor};
use crate::tensor::{self, SwigluParams, Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MoeError {
    #[error("invalid moe config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

pub type Result<T> = std::result::Result<T, MoeError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub top_k: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub swiglu: SwigluParams,
    /// Per-expert bias vectors on gate, linear and down projections.
    pub expert_bias: bool,
    pub router_bias: bool,
}

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(MoeError::Config(format!(
                "top_k {} must be in 1..={}",
                self.top_k, self.n_experts
            )));
        }
        if self.d_model == 0 || self.d_ff == 0 {
            return Err(MoeError::Config("d_model and d_ff must be positive".into()));
        }
        if !(self.swiglu.clamp_bound > 0.0) {
            return Err(MoeError::Config("clamp bound must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RouterOutput {
    /// Selected experts, highest logit first (ties: lower index first).
    pub indices: Vec<usize>,
    pub weights: Vec<f32>,
}

pub fn route_topk(router_logits: &[f32], top_k: usize) -> Result<RouterOutput> {
    if top_k == 0 || top_k > router_logits.len() {
        return Err(MoeError::Config(format!(
            "top_k {} must be in 1..={}",
            top_k,
            router_logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..router_logits.len()).collect();
    order.sort_by(|&a, &b| router_logits[b].total_cmp(&router_logits[a]).then(a.cmp(&b)));
    order.truncate(top_k);
    let selected: Vec<f32> = order.iter().map(|&i| router_logits[i]).collect();
    let weights = tensor::softmax(&selected)?;
    Ok(RouterOutput {
        indices: order,
        weights,
    })
}

/// A weight matrix held either at full precision or as MXFP4 blocks.
#[derive(Debug, Clone, PartialEq)]
pub enum Weight {
    Dense(Tensor),
    Mxfp4(QuantizedTensor),
}

impl Weight {
    pub fn shape(&self) -> &[usize] {
        match self {
            Weight::Dense(t) => t.shape(),
            Weight::Mxfp4(q) => q.shape(),
        }
    }

    pub fn to_dense(&self) -> Tensor {
        match self {
            Weight::Dense(t) => t.clone(),
            Weight::Mxfp4(q) => q.dequantize(),
        }
    }

    pub fn is_quantized(&self) -> bool {
        matches!(self, Weight::Mxfp4(_))
    }

    pub fn quantized(&self) -> Result<Weight> {
        Ok(match self {
            Weight::Dense(t) => Weight::Mxfp4(QuantizedTensor::quantize(t)?),
            Weight::Mxfp4(q) => Weight::Mxfp4(q.clone()),
        })
    }

    pub fn vecmat_f64(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(match self {
            Weight::Dense(t) => tensor::vecmat_f64(x, t)?,
            Weight::Mxfp4(q) => tensor::vecmat_f64(x, &q.dequantize())?,
        })
    }

    pub fn vecmat(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(match self {
            Weight::Dense(t) => tensor::vecmat(x, t)?,
            Weight::Mxfp4(q) => tensor::vecmat(x, &q.dequantize())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertBiases {
    pub gate: Vec<f32>,
    pub lin: Vec<f32>,
    pub down: Vec<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Expert {
    /// `[d_model, d_ff]`
    pub gate: Weight,
    /// `[d_model, d_ff]`
    pub lin: Weight,
    /// `[d_ff, d_model]`
    pub down: Weight,
    pub biases: Option<ExpertBiases>,
}

fn add_bias(mut v: Vec<f64>, bias: Option<&Vec<f32>>) -> Vec<f64> {
    if let Some(b) = bias {
        for (x, &bb) in v.iter_mut().zip(b) {
            *x += bb as f64;
        }
    }
    v
}

impl Expert {
    pub fn forward(&self, x: &[f32], swiglu: SwigluParams) -> Result<Vec<f32>> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(self.forward_f64(&x, swiglu)?.into_iter().map(|v| v as f32).collect())
    }

    /// Same as `forward` with every intermediate kept in f64.
    pub fn forward_f64(&self, x: &[f64], swiglu: SwigluParams) -> Result<Vec<f64>> {
        let b = self.biases.as_ref();
        let gate = add_bias(self.gate.vecmat_f64(x)?, b.map(|b| &b.gate));
        let lin = add_bias(self.lin.vecmat_f64(x)?, b.map(|b| &b.lin));
        if gate.len() != lin.len() {
            return Err(TensorError::ShapeMismatch {
                op: "swiglu_gated",
                left: vec![gate.len()],
                right: vec![lin.len()],
            }
            .into());
        }
        let h: Vec<f64> = gate.iter().zip(&lin).map(|(&g, &l)| tensor::swiglu_elem(g, l, swiglu)).collect();
        Ok(add_bias(self.down.vecmat_f64(&h)?, b.map(|b| &b.down)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeWeights {
    /// `[d_model, n_experts]`, never quantized.
    pub router: Tensor,
    pub router_bias: Option<Vec<f32>>,
    pub experts: Vec<Expert>,
}

impl MoeWeights {
    pub fn router_logits(&self, x: &[f32]) -> Result<Vec<f32>> {
        Ok(self.router_logits_f64(x)?.into_iter().map(|v| v as f32).collect())
    }

    fn router_logits_f64(&self, x: &[f32]) -> Result<Vec<f64>> {
        let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        Ok(add_bias(tensor::vecmat_f64(&x, &self.router)?, self.router_bias.as_ref()))
    }

    pub fn check_shapes(&self, cfg: &MoeConfig) -> Result<()> {
        let n_router = self.router.shape().get(1).copied().unwrap_or(0);
        if self.router.shape() != [cfg.d_model, cfg.n_experts] || self.experts.len() != n_router {
            return Err(MoeError::Config(format!(
                "router shape {:?} and {} experts do not match config ({} experts, d_model {})",
                self.router.shape(),
                self.experts.len(),
                cfg.n_experts,
                cfg.d_model
            )));
        }
        for (i, e) in self.experts.iter().enumerate() {
            if e.gate.shape() != [cfg.d_model, cfg.d_ff]
                || e.lin.shape() != [cfg.d_model, cfg.d_ff]
                || e.down.shape() != [cfg.d_ff, cfg.d_model]
            {
                return Err(MoeError::Config(format!("expert {i} has mismatched weight shapes")));
            }
        }
        Ok(())
    }

    /// `Σ_selected weight_e · expert_e(x)`, summed in ascending expert index.
    pub fn forward(&self, x: &[f32], cfg: &MoeConfig) -> Result<Vec<f32>> {
        if self.experts.len() != cfg.n_experts || self.router.shape().get(1) != Some(&cfg.n_experts) {
            return Err(MoeError::Config(format!(
                "{} experts and router width {:?} vs configured {}",
                self.experts.len(),
                self.router.shape().get(1),
                cfg.n_experts
            )));
        }
        let logits = self.router_logits_f64(x)?;
        let narrow: Vec<f32> = logits.iter().map(|&v| v as f32).collect();
        let route = route_topk(&narrow, cfg.top_k)?;
        // Mixing weights from the f64 logits; selection matches route_topk.
        let max = route.indices.iter().map(|&e| logits[e]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = route.indices.iter().map(|&e| (logits[e] - max).exp()).sum();
        let mut picks: Vec<(usize, f64)> = route.indices.iter().map(|&e| (e, (logits[e] - max).exp() / z)).collect();
        picks.sort_by_key(|&(e, _)| e);
        let xd: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut acc = vec![0.0f64; cfg.d_model];
        for (e, w) in picks {
            let y = self.experts[e].forward_f64(&xd, cfg.swiglu)?;
            for (a, v) in acc.iter_mut().zip(y) {
                *a += w * v;
            }
        }
        Ok(acc.into_iter().map(|v| v as f32).collect())
    }

    pub fn quantize_experts(&mut self) -> Result<()> {
        for e in &mut self.experts {
            e.gate = e.gate.quantized()?;
            e.lin = e.lin.quantized()?;
            e.down = e.down.quantized()?;
        }
        Ok(())
    }

    pub fn dequantize_experts(&mut self) {
        for e in &mut self.experts {
            e.gate = Weight::Dense(e.gate.to_dense());
            e.lin = Weight::Dense(e.lin.to_dense());
            e.down = Weight::Dense(e.down.to_dense());
        }
    }
}
