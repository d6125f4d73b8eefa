//! Checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "OSSM" | u32 version | u64 header_len | header (JSON, header_len bytes) | payload
//! ```
//!
//! The header carries the model config, a SHA-256 of the payload and a
//! directory of `{name, shape, encoding, offset, length}` entries with
//! offsets relative to the start of the payload. `f32` sections are raw
//! little-endian floats; `mxfp4` sections are a u32 pad count followed by
//! 17-byte blocks.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::attention::AttentionWeights;
use crate::model::{expert_tensor_name, Layer, Model, ModelConfig, ModelError, TensorView};
use crate::moe::{Expert, ExpertBiases, MoeWeights, Weight};
use crate::quant::{QuantError, QuantizedTensor};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"OSSM";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("payload truncated inside tensor {tensor:?}")]
    Truncated { tensor: String },
    #[error("payload checksum mismatch (expected {expected}, found {found})")]
    ChecksumMismatch { expected: String, found: String },
    #[error("tensor {0:?} missing from checkpoint")]
    MissingTensor(String),
    #[error("tensor {0:?} listed more than once")]
    DuplicateTensor(String),
    #[error("tensor {0:?} is not part of this model config")]
    UnexpectedTensor(String),
    #[error("sections {0:?} and {1:?} overlap")]
    Overlap(String, String),
    #[error("tensor {name:?}: {reason}")]
    BadTensor { name: String, reason: String },
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Encoding {
    F32,
    Mxfp4,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub encoding: Encoding,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format_version: u32,
    pub config: ModelConfig,
    pub payload_len: u64,
    pub payload_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

fn encode_view(view: &TensorView<'_>) -> (Encoding, Vec<u8>) {
    match view {
        TensorView::F32 { data, .. } | TensorView::Vector(data) => {
            (Encoding::F32, data.iter().flat_map(|v| v.to_le_bytes()).collect())
        }
        TensorView::Mxfp4(q) => (Encoding::Mxfp4, q.to_bytes()),
    }
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, view) in model.named_tensors() {
        let (encoding, bytes) = encode_view(&view);
        tensors.push(TensorEntry {
            name,
            shape: view.shape(),
            encoding,
            offset: payload.len() as u64,
            length: bytes.len() as u64,
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        payload_len: payload.len() as u64,
        payload_sha256: hex::encode(Sha256::digest(&payload)),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header is always serializable");
    let mut out = Vec::with_capacity(PREAMBLE_LEN + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    out
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

pub fn read_header(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < PREAMBLE_LEN {
        return Err(CheckpointError::MalformedHeader("file shorter than the fixed preamble".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = (PREAMBLE_LEN as u64)
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len() as u64)
        .ok_or_else(|| CheckpointError::MalformedHeader(format!("header length {header_len} exceeds file size")))?
        as usize;
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE_LEN..header_end])
        .map_err(|e| CheckpointError::MalformedHeader(e.to_string()))?;
    if header.format_version != version {
        return Err(CheckpointError::MalformedHeader(format!(
            "header version {} disagrees with preamble version {version}",
            header.format_version
        )));
    }
    Ok((header, &bytes[header_end..]))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    let (header, payload) = read_header(bytes)?;

    let mut sections: HashMap<&str, &TensorEntry> = HashMap::new();
    for entry in &header.tensors {
        if sections.insert(entry.name.as_str(), entry).is_some() {
            return Err(CheckpointError::DuplicateTensor(entry.name.clone()));
        }
    }
    let mut by_offset: Vec<&TensorEntry> = header.tensors.iter().collect();
    by_offset.sort_by_key(|e| (e.offset, e.length));
    for pair in by_offset.windows(2) {
        if pair[0].offset + pair[0].length > pair[1].offset {
            return Err(CheckpointError::Overlap(pair[0].name.clone(), pair[1].name.clone()));
        }
    }
    for entry in &by_offset {
        let end = entry.offset.checked_add(entry.length);
        if end.is_none_or(|end| end > payload.len() as u64) {
            return Err(CheckpointError::Truncated {
                tensor: entry.name.clone(),
            });
        }
    }
    if payload.len() as u64 != header.payload_len {
        return Err(CheckpointError::MalformedHeader(format!(
            "payload is {} bytes, header says {}",
            payload.len(),
            header.payload_len
        )));
    }
    let found = hex::encode(Sha256::digest(payload));
    if found != header.payload_sha256 {
        return Err(CheckpointError::ChecksumMismatch {
            expected: header.payload_sha256.clone(),
            found,
        });
    }

    let mut reader = SectionReader {
        payload,
        sections,
        used: 0,
    };
    let model = assemble(header.config, &mut reader)?;
    if reader.used != header.tensors.len() {
        let expected: std::collections::HashSet<String> =
            model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let extra = header
            .tensors
            .iter()
            .find(|e| !expected.contains(&e.name))
            .map(|e| e.name.clone())
            .unwrap_or_default();
        return Err(CheckpointError::UnexpectedTensor(extra));
    }
    model.check_shapes()?;
    Ok(model)
}

struct SectionReader<'a> {
    payload: &'a [u8],
    sections: HashMap<&'a str, &'a TensorEntry>,
    used: usize,
}

impl SectionReader<'_> {
    fn entry(&mut self, name: &str) -> Result<&TensorEntry> {
        let entry = *self
            .sections
            .get(name)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        self.used += 1;
        Ok(entry)
    }

    fn bytes(&self, entry: &TensorEntry) -> &[u8] {
        &self.payload[entry.offset as usize..(entry.offset + entry.length) as usize]
    }

    fn f32s(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f32>> {
        let entry = self.entry(name)?.clone();
        let bad = |reason: String| CheckpointError::BadTensor {
            name: name.to_string(),
            reason,
        };
        if entry.encoding != Encoding::F32 {
            return Err(bad("expected f32 encoding".into()));
        }
        if entry.shape != shape {
            return Err(bad(format!("shape {:?}, expected {:?}", entry.shape, shape)));
        }
        let numel: usize = shape.iter().product();
        if entry.length as usize != numel * 4 {
            return Err(bad(format!("section is {} bytes for {numel} floats", entry.length)));
        }
        Ok(self
            .bytes(&entry)
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Vec<f32>> {
        self.f32s(name, &[len])
    }

    fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Tensor> {
        let data = self.f32s(name, &[rows, cols])?;
        Ok(Tensor::from_vec(&[rows, cols], data).expect("length checked"))
    }

    fn weight(&mut self, name: &str, rows: usize, cols: usize) -> Result<Weight> {
        let encoding = self
            .sections
            .get(name)
            .map(|e| e.encoding)
            .ok_or_else(|| CheckpointError::MissingTensor(name.to_string()))?;
        match encoding {
            Encoding::F32 => Ok(Weight::Dense(self.matrix(name, rows, cols)?)),
            Encoding::Mxfp4 => {
                let entry = self.entry(name)?.clone();
                if entry.shape != [rows, cols] {
                    return Err(CheckpointError::BadTensor {
                        name: name.to_string(),
                        reason: format!("shape {:?}, expected {:?}", entry.shape, [rows, cols]),
                    });
                }
                let q = QuantizedTensor::from_bytes(entry.shape.clone(), self.bytes(&entry))?;
                Ok(Weight::Mxfp4(q))
            }
        }
    }
}

fn assemble(config: ModelConfig, r: &mut SectionReader<'_>) -> Result<Model> {
    config.validate()?;
    let d = config.d_model;
    let a = &config.attention;
    let m = &config.moe;
    let embed = r.matrix("embed", config.vocab_size, d)?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = format!("layers.{l}");
        let attn_norm = r.vector(&format!("{p}.attn_norm"), d)?;
        let attention = AttentionWeights {
            wq: r.matrix(&format!("{p}.attn.q"), d, a.q_dim())?,
            wk: r.matrix(&format!("{p}.attn.k"), d, a.kv_dim())?,
            wv: r.matrix(&format!("{p}.attn.v"), d, a.kv_dim())?,
            wo: r.matrix(&format!("{p}.attn.o"), a.q_dim(), d)?,
            sinks: r.vector(&format!("{p}.attn.sinks"), a.n_query_heads)?,
        };
        let moe_norm = r.vector(&format!("{p}.moe_norm"), d)?;
        let router = r.matrix(&format!("{p}.moe.router"), d, m.n_experts)?;
        let router_bias = if m.router_bias {
            Some(r.vector(&format!("{p}.moe.router_bias"), m.n_experts)?)
        } else {
            None
        };
        let mut experts = Vec::with_capacity(m.n_experts);
        for e in 0..m.n_experts {
            let gate = r.weight(&expert_tensor_name(l, e, "gate"), d, m.d_ff)?;
            let lin = r.weight(&expert_tensor_name(l, e, "lin"), d, m.d_ff)?;
            let down = r.weight(&expert_tensor_name(l, e, "down"), m.d_ff, d)?;
            let biases = if m.expert_bias {
                Some(ExpertBiases {
                    gate: r.vector(&expert_tensor_name(l, e, "gate_bias"), m.d_ff)?,
                    lin: r.vector(&expert_tensor_name(l, e, "lin_bias"), m.d_ff)?,
                    down: r.vector(&expert_tensor_name(l, e, "down_bias"), d)?,
                })
            } else {
                None
            };
            experts.push(Expert {
                gate,
                lin,
                down,
                biases,
            });
        }
        layers.push(Layer {
            attn_norm,
            attention,
            moe_norm,
            moe: MoeWeights {
                router,
                router_bias,
                experts,
            },
        });
    }
    let final_norm = r.vector("final_norm", d)?;
    let unembed = if config.tie_embeddings {
        None
    } else {
        Some(r.matrix("unembed", config.vocab_size, d)?)
    };
    Ok(Model {
        config,
        embed,
        layers,
        final_norm,
        unembed,
    })
}
