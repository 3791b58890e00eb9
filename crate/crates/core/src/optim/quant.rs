use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BLOCK: usize = 256;

/// One quantized block: 8-bit codes plus the block's absmax scale.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedBlock {
    /// Raw code bytes; reinterpret as `i8` when `signed`.
    pub codes: Vec<u8>,
    pub scale: f32,
    pub signed: bool,
}

/// Linear absmax quantization of a block.
///
/// Signed: `code = round(v / scale * 127)` in `[-127, 127]`.
/// Unsigned: `code = round(v / scale * 255)` in `[0, 255]`; inputs must be non-negative.
pub fn quantize_block(values: &[f32], signed: bool) -> Result<QuantizedBlock> {
    if values.is_empty() {
        return Err(Error::InvalidArgument("empty quantization block".into()));
    }
    if !signed {
        if let Some(v) = values.iter().find(|v| **v < 0.0) {
            return Err(Error::Contract(format!(
                "unsigned quantizer received negative value {v}"
            )));
        }
    }
    let scale = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    let mut codes = vec![0u8; values.len()];
    if scale > 0.0 {
        encode_into(values, scale, signed, &mut codes);
    }
    Ok(QuantizedBlock {
        codes,
        scale,
        signed,
    })
}

fn encode_into(values: &[f32], scale: f32, signed: bool, codes: &mut [u8]) {
    if signed {
        for (c, &v) in codes.iter_mut().zip(values) {
            *c = ((v / scale) * 127.0).round().clamp(-127.0, 127.0) as i8 as u8;
        }
    } else {
        for (c, &v) in codes.iter_mut().zip(values) {
            *c = ((v / scale) * 255.0).round().clamp(0.0, 255.0) as u8;
        }
    }
}

#[inline]
fn decode(code: u8, scale: f32, signed: bool) -> f32 {
    if signed {
        (f32::from(code as i8) / 127.0) * scale
    } else {
        (f32::from(code) / 255.0) * scale
    }
}

pub fn dequantize_block(block: &QuantizedBlock) -> Vec<f32> {
    block
        .codes
        .iter()
        .map(|&c| decode(c, block.scale, block.signed))
        .collect()
}

/// A whole tensor's moment stored as 8-bit codes with one scale per block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedMoment {
    pub codes: Vec<u8>,
    pub scales: Vec<f32>,
    pub signed: bool,
    pub block: usize,
}

impl QuantizedMoment {
    pub fn zeros(len: usize, block: usize, signed: bool) -> Self {
        Self {
            codes: vec![0; len],
            scales: vec![0.0; len.div_ceil(block)],
            signed,
            block,
        }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Dequantizes block `b` into `out`.
    pub fn load_block(&self, b: usize, out: &mut [f32]) {
        let start = b * self.block;
        let scale = self.scales[b];
        for (o, &c) in out.iter_mut().zip(&self.codes[start..]) {
            *o = decode(c, scale, self.signed);
        }
    }

    /// Requantizes `values` into block `b`.
    pub fn store_block(&mut self, b: usize, values: &[f32]) {
        let start = b * self.block;
        let scale = values.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        self.scales[b] = scale;
        let codes = &mut self.codes[start..start + values.len()];
        if scale > 0.0 {
            encode_into(values, scale, self.signed, codes);
        } else {
            codes.fill(0);
        }
    }

    pub fn dequantize(&self) -> Vec<f32> {
        let mut out = vec![0.0; self.len()];
        for (b, chunk) in out.chunks_mut(self.block).enumerate() {
            self.load_block(b, chunk);
        }
        out
    }

    pub fn quantize(values: &[f32], block: usize, signed: bool) -> Result<Self> {
        if !signed && values.iter().any(|v| *v < 0.0) {
            return Err(Error::Contract(
                "unsigned moment with negative values".into(),
            ));
        }
        let mut m = Self::zeros(values.len(), block, signed);
        for (b, chunk) in values.chunks(block).enumerate() {
            m.store_block(b, chunk);
        }
        Ok(m)
    }
}
