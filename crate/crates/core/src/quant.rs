//! MXFP4 block codec.
//!
//! A block holds 32 E2M1 codes (sign, two exponent bits, one mantissa bit)
//! and one E8M0 power-of-two scale. On disk a block is 17 bytes: 16 bytes of
//! codes packed two per byte (low nibble = earlier element) followed by the
//! biased scale byte.

use thiserror::Error;

use crate::tensor::Tensor;

pub const BLOCK_SIZE: usize = 32;
pub const BLOCK_BYTES: usize = BLOCK_SIZE / 2 + 1;

/// Magnitudes addressed by the low three bits of an E2M1 code.
pub const E2M1_MAGNITUDES: [f32; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];
pub const E2M1_MAX: f32 = 6.0;

pub const MIN_SCALE_EXP: i32 = -127;
pub const MAX_SCALE_EXP: i32 = 127;
const E8M0_BIAS: i32 = 127;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("cannot encode non-finite value {value} at element {index}")]
    NonFinite { index: usize, value: f32 },
    #[error("scale byte 0x{0:02x} is not a valid E8M0 exponent")]
    InvalidScale(u8),
    #[error("expected {expected} bytes, got {actual}")]
    Length { expected: usize, actual: usize },
    #[error("block count {blocks} does not cover shape {shape:?} with pad {pad}")]
    Layout {
        shape: Vec<usize>,
        blocks: usize,
        pad: usize,
    },
}

pub fn decode_e2m1(code: u8) -> f32 {
    let magnitude = E2M1_MAGNITUDES[(code & 0b0111) as usize];
    if code & 0b1000 != 0 {
        -magnitude
    } else {
        magnitude
    }
}

/// Nearest E2M1 code for an already-scaled value in `[-6, 6]`; exact ties go
/// to the code whose 3-bit magnitude index is even.
fn encode_e2m1(scaled: f64) -> u8 {
    let mag = scaled.abs();
    let mut best = 0u8;
    let mut best_err = f64::INFINITY;
    for (idx, &m) in E2M1_MAGNITUDES.iter().enumerate() {
        let err = (mag - m as f64).abs();
        if err < best_err || (err == best_err && idx % 2 == 0) {
            best = idx as u8;
            best_err = err;
        }
    }
    if best != 0 && scaled < 0.0 {
        best | 0b1000
    } else {
        best
    }
}

/// Smallest exponent `e` with `6 * 2^e >= max_abs`, clamped to the E8M0 range.
pub fn covering_scale_exp(max_abs: f32) -> i32 {
    if max_abs == 0.0 {
        return MIN_SCALE_EXP;
    }
    let target = max_abs as f64 / E2M1_MAX as f64;
    let mut e = target.log2().ceil() as i32;
    // log2 can land one off near exact powers of two.
    while e > MIN_SCALE_EXP && E2M1_MAX as f64 * 2f64.powi(e - 1) >= max_abs as f64 {
        e -= 1;
    }
    while (E2M1_MAX as f64) * 2f64.powi(e) < max_abs as f64 {
        e += 1;
    }
    e.clamp(MIN_SCALE_EXP, MAX_SCALE_EXP)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MxBlock {
    /// One 4-bit code per element, stored unpacked.
    pub codes: [u8; BLOCK_SIZE],
    pub scale_exp: i8,
}

impl MxBlock {
    pub fn scale(&self) -> f64 {
        2f64.powi(self.scale_exp as i32)
    }

    pub fn to_bytes(&self) -> [u8; BLOCK_BYTES] {
        let mut out = [0u8; BLOCK_BYTES];
        for (i, pair) in self.codes.chunks_exact(2).enumerate() {
            out[i] = (pair[0] & 0x0f) | ((pair[1] & 0x0f) << 4);
        }
        out[BLOCK_BYTES - 1] = (self.scale_exp as i32 + E8M0_BIAS) as u8;
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, QuantError> {
        if bytes.len() != BLOCK_BYTES {
            return Err(QuantError::Length {
                expected: BLOCK_BYTES,
                actual: bytes.len(),
            });
        }
        let scale_byte = bytes[BLOCK_BYTES - 1];
        if scale_byte == 0xff {
            return Err(QuantError::InvalidScale(scale_byte));
        }
        let mut codes = [0u8; BLOCK_SIZE];
        for (i, &b) in bytes[..BLOCK_BYTES - 1].iter().enumerate() {
            codes[2 * i] = b & 0x0f;
            codes[2 * i + 1] = b >> 4;
        }
        Ok(Self {
            codes,
            scale_exp: (scale_byte as i32 - E8M0_BIAS) as i8,
        })
    }
}

pub fn quantize_block(values: &[f32; BLOCK_SIZE]) -> Result<MxBlock, QuantError> {
    if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !v.is_finite()) {
        return Err(QuantError::NonFinite { index, value });
    }
    let max_abs = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let scale_exp = covering_scale_exp(max_abs);
    Ok(quantize_block_at(values, scale_exp))
}

/// Encodes with a caller-chosen exponent. Values beyond `6 * 2^scale_exp`
/// saturate to the largest code.
pub fn quantize_block_at(values: &[f32; BLOCK_SIZE], scale_exp: i32) -> MxBlock {
    let scale_exp = scale_exp.clamp(MIN_SCALE_EXP, MAX_SCALE_EXP);
    let inv = 2f64.powi(-scale_exp);
    let mut codes = [0u8; BLOCK_SIZE];
    for (c, &v) in codes.iter_mut().zip(values) {
        let scaled = (v as f64 * inv).clamp(-(E2M1_MAX as f64), E2M1_MAX as f64);
        *c = encode_e2m1(scaled);
    }
    MxBlock {
        codes,
        scale_exp: scale_exp as i8,
    }
}

pub fn dequantize_block(block: &MxBlock) -> [f32; BLOCK_SIZE] {
    let scale = block.scale();
    let mut out = [0.0f32; BLOCK_SIZE];
    for (o, &c) in out.iter_mut().zip(&block.codes) {
        *o = (decode_e2m1(c) as f64 * scale) as f32;
    }
    out
}

/// Largest possible `|x - dequantize(quantize(x))|` for an in-range element
/// at the given scale: half of the widest lattice gap (the 4 → 6 step).
pub fn max_rounding_error(scale_exp: i8) -> f64 {
    let widest = E2M1_MAGNITUDES
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64)
        .fold(0.0, f64::max);
    0.5 * widest * 2f64.powi(scale_exp as i32)
}

/// A tensor flattened and cut into 32-element blocks, last block zero-padded.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    shape: Vec<usize>,
    blocks: Vec<MxBlock>,
    pad_count: usize,
}

impl QuantizedTensor {
    pub fn quantize(t: &Tensor) -> Result<Self, QuantError> {
        let data = t.data();
        let n_blocks = data.len().div_ceil(BLOCK_SIZE);
        let pad_count = n_blocks * BLOCK_SIZE - data.len();
        let mut blocks = Vec::with_capacity(n_blocks);
        for (bi, chunk) in data.chunks(BLOCK_SIZE).enumerate() {
            let mut buf = [0.0f32; BLOCK_SIZE];
            buf[..chunk.len()].copy_from_slice(chunk);
            let block = quantize_block(&buf).map_err(|e| match e {
                QuantError::NonFinite { index, value } => QuantError::NonFinite {
                    index: bi * BLOCK_SIZE + index,
                    value,
                },
                other => other,
            })?;
            blocks.push(block);
        }
        Ok(Self {
            shape: t.shape().to_vec(),
            blocks,
            pad_count,
        })
    }

    pub fn from_parts(shape: Vec<usize>, blocks: Vec<MxBlock>, pad_count: usize) -> Result<Self, QuantError> {
        let numel: usize = shape.iter().product();
        if blocks.len() != numel.div_ceil(BLOCK_SIZE) || blocks.len() * BLOCK_SIZE != numel + pad_count {
            return Err(QuantError::Layout {
                shape,
                blocks: blocks.len(),
                pad: pad_count,
            });
        }
        Ok(Self {
            shape,
            blocks,
            pad_count,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn blocks(&self) -> &[MxBlock] {
        &self.blocks
    }

    pub fn pad_count(&self) -> usize {
        self.pad_count
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn dequantize(&self) -> Tensor {
        let numel = self.numel();
        let mut data = Vec::with_capacity(self.blocks.len() * BLOCK_SIZE);
        for b in &self.blocks {
            data.extend_from_slice(&dequantize_block(b));
        }
        data.truncate(numel);
        Tensor::from_vec(&self.shape, data).expect("block layout checked at construction")
    }

    pub fn stored_bits(&self) -> u64 {
        (self.blocks.len() * BLOCK_BYTES * 8) as u64
    }

    /// Stored bits per logical element; 4.25 whenever no padding is needed.
    pub fn storage_bits(&self) -> f64 {
        self.stored_bits() as f64 / self.numel() as f64
    }

    /// Section encoding: little-endian u32 pad count, then the blocks.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.blocks.len() * BLOCK_BYTES);
        out.extend_from_slice(&(self.pad_count as u32).to_le_bytes());
        for b in &self.blocks {
            out.extend_from_slice(&b.to_bytes());
        }
        out
    }

    pub fn section_len(numel: usize) -> usize {
        4 + numel.div_ceil(BLOCK_SIZE) * BLOCK_BYTES
    }

    pub fn from_bytes(shape: Vec<usize>, bytes: &[u8]) -> Result<Self, QuantError> {
        let numel: usize = shape.iter().product();
        let expected = Self::section_len(numel);
        if bytes.len() != expected {
            return Err(QuantError::Length {
                expected,
                actual: bytes.len(),
            });
        }
        let pad = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
        let blocks = bytes[4..]
            .chunks_exact(BLOCK_BYTES)
            .map(MxBlock::from_bytes)
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_parts(shape, blocks, pad)
    }
}
