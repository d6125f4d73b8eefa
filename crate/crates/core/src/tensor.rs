//! Dense f32 tensors and the handful of kernels the model needs.
//!
//! Storage is row-major `Vec<f32>`. Reductions (dot products, sums of
//! exponentials, mean squares) accumulate in f64 in a fixed left-to-right
//! order and round once at the end, so every kernel is bit-reproducible.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} needs {expected} elements, got {actual}")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("{op}: expected a rank-{expected} tensor, got shape {shape:?}")]
    Rank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("softmax over zero unmasked positions with a -inf sink is undefined")]
    DegenerateSoftmax,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: invalid argument: {reason}")]
    InvalidArgument { op: &'static str, reason: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("numel", &self.data.len())
            .finish()
    }
}

impl Tensor {
    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                actual: data.len(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Rows of a tensor viewed as `[numel / last_dim, last_dim]`.
    pub fn rows(&self) -> std::slice::ChunksExact<'_, f32> {
        self.data.chunks_exact(self.last_dim().max(1))
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let d = self.last_dim();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Rank {
                op,
                expected: 2,
                shape: self.shape.clone(),
            }),
        }
    }
}

fn ensure_finite(op: &'static str, values: &[f32]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

/// Dot product accumulated in f64, left to right.
pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0f64, |acc, (&x, &y)| acc + x as f64 * y as f64)
}

/// `[m×k] × [k×n] → [m×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.matrix_dims("matmul")?;
    let (k2, n) = b.matrix_dims("matmul")?;
    if k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0f32; m * n];
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let a_row = &a.data[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b.data[p * n..(p + 1) * n];
            for (slot, &bv) in acc.iter_mut().zip(b_row) {
                *slot += av as f64 * bv as f64;
            }
        }
        for (o, &v) in out[i * n..(i + 1) * n].iter_mut().zip(&acc) {
            *o = v as f32;
        }
    }
    ensure_finite("matmul", &out)?;
    Tensor::from_vec(&[m, n], out)
}

/// Row vector times matrix: `x[k] · w[k×n] → [n]`.
pub fn vecmat(x: &[f32], w: &Tensor) -> Result<Vec<f32>> {
    let x: Vec<f64> = x.iter().map(|&v| f64::from(v)).collect();
    let out: Vec<f32> = vecmat_f64(&x, w)?.into_iter().map(|v| v as f32).collect();
    ensure_finite("vecmat", &out)?;
    Ok(out)
}

/// `vecmat` with an f64 input and output, for callers that keep
/// intermediates in double precision.
pub fn vecmat_f64(x: &[f64], w: &Tensor) -> Result<Vec<f64>> {
    let (k, n) = w.matrix_dims("vecmat")?;
    if x.len() != k {
        return Err(TensorError::ShapeMismatch {
            op: "vecmat",
            left: vec![x.len()],
            right: w.shape.clone(),
        });
    }
    let mut acc = vec![0.0f64; n];
    for (p, &xv) in x.iter().enumerate() {
        let w_row = &w.data[p * n..(p + 1) * n];
        for (slot, &wv) in acc.iter_mut().zip(w_row) {
            *slot += xv * wv as f64;
        }
    }
    Ok(acc)
}

/// RMS normalization over the last axis: `gain * x / sqrt(mean(x²) + eps)`.
pub fn rms_norm(x: &Tensor, gain: &[f32], eps: f32) -> Result<Tensor> {
    if !(eps >= 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "rms_norm",
            reason: format!("eps must be non-negative, got {eps}"),
        });
    }
    let d = x.last_dim();
    if d != gain.len() {
        return Err(TensorError::ShapeMismatch {
            op: "rms_norm",
            left: x.shape.clone(),
            right: vec![gain.len()],
        });
    }
    let mut out = Vec::with_capacity(x.numel());
    for row in x.rows() {
        out.extend(rms_norm_row(row, gain, eps));
    }
    ensure_finite("rms_norm", &out)?;
    Tensor::from_vec(&x.shape, out)
}

pub(crate) fn rms_norm_row(row: &[f32], gain: &[f32], eps: f32) -> Vec<f32> {
    let mean_sq = row.iter().map(|&v| v as f64 * v as f64).sum::<f64>() / row.len().max(1) as f64;
    let denom = (mean_sq + eps as f64).sqrt();
    row.iter()
        .zip(gain)
        .map(|(&v, &g)| {
            if denom == 0.0 {
                0.0
            } else {
                (g as f64 * v as f64 / denom) as f32
            }
        })
        .collect()
}

/// Softmax whose denominator carries an extra `exp(sink_bias)` term.
///
/// Masked positions (`mask[i] == false`) get weight 0. The returned weights
/// sum to at most 1; the remainder is the mass absorbed by the sink.
pub fn softmax_with_sink(scores: &[f32], sink_bias: f32, mask: &[bool]) -> Result<Vec<f32>> {
    if scores.len() != mask.len() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_with_sink",
            left: vec![scores.len()],
            right: vec![mask.len()],
        });
    }
    if sink_bias.is_nan() || scores.iter().zip(mask).any(|(s, &m)| m && !s.is_finite()) {
        return Err(TensorError::InvalidArgument {
            op: "softmax_with_sink",
            reason: "unmasked scores must be finite and the sink bias must not be NaN".into(),
        });
    }
    let any_unmasked = mask.iter().any(|&m| m);
    if !any_unmasked && sink_bias == f32::NEG_INFINITY {
        return Err(TensorError::DegenerateSoftmax);
    }
    if sink_bias == f32::INFINITY {
        return Ok(vec![0.0; scores.len()]);
    }
    let max_score = scores
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&s, _)| s as f64)
        .fold(f64::NEG_INFINITY, f64::max);
    let m = max_score.max(sink_bias as f64);
    let sink_term = if sink_bias == f32::NEG_INFINITY {
        0.0
    } else {
        (sink_bias as f64 - m).exp()
    };
    let exps: Vec<f64> = scores
        .iter()
        .zip(mask)
        .map(|(&s, &keep)| if keep { (s as f64 - m).exp() } else { 0.0 })
        .collect();
    let denom = sink_term + exps.iter().sum::<f64>();
    Ok(exps.into_iter().map(|e| (e / denom) as f32).collect())
}

/// Plain softmax over all entries.
pub fn softmax(scores: &[f32]) -> Result<Vec<f32>> {
    softmax_with_sink(scores, f32::NEG_INFINITY, &vec![true; scores.len()])
}

pub fn silu(z: f32) -> f32 {
    let z = z as f64;
    (z / (1.0 + (-z).exp())) as f32
}

/// Parameters of the clamped, offset SwiGLU used inside every expert.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwigluParams {
    /// Both branches are clamped to `[-clamp_bound, clamp_bound]`.
    pub clamp_bound: f32,
    /// Added to the linear branch after clamping.
    pub linear_offset: f32,
}

impl Default for SwigluParams {
    fn default() -> Self {
        Self {
            clamp_bound: 7.0,
            linear_offset: 1.0,
        }
    }
}

impl SwigluParams {
    /// Largest output magnitude the activation can produce.
    pub fn output_bound(&self) -> f32 {
        silu(self.clamp_bound) * (self.clamp_bound + self.linear_offset.abs())
    }
}

/// One element of the clamped SwiGLU, in f64.
pub fn swiglu_elem(gate: f64, lin: f64, params: SwigluParams) -> f64 {
    let b = params.clamp_bound as f64;
    let g = gate.clamp(-b, b);
    let l = lin.clamp(-b, b);
    g / (1.0 + (-g).exp()) * (l + params.linear_offset as f64)
}

/// `silu(clamp(gate)) * (clamp(lin) + offset)`, elementwise.
pub fn swiglu_gated(gate_in: &[f32], lin_in: &[f32], params: SwigluParams) -> Result<Vec<f32>> {
    if gate_in.len() != lin_in.len() {
        return Err(TensorError::ShapeMismatch {
            op: "swiglu_gated",
            left: vec![gate_in.len()],
            right: vec![lin_in.len()],
        });
    }
    if !(params.clamp_bound > 0.0) {
        return Err(TensorError::InvalidArgument {
            op: "swiglu_gated",
            reason: format!("clamp bound must be positive, got {}", params.clamp_bound),
        });
    }
    let out: Vec<f32> = gate_in
        .iter()
        .zip(lin_in)
        .map(|(&g, &l)| swiglu_elem(g as f64, l as f64, params) as f32)
        .collect();
    ensure_finite("swiglu_gated", &out)?;
    Ok(out)
}
