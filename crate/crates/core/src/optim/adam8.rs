use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quant::{QuantizedMoment, DEFAULT_BLOCK};
use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub block: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            block: DEFAULT_BLOCK,
        }
    }
}

impl AdamConfig {
    /// Largest `|m_hat / sqrt(v_hat)|` reachable with exact moments
    /// (Cauchy-Schwarz over the EMA weights; bias correction only shrinks it).
    /// Quantized moments can break this when `v` rounds to zero while `m`
    /// does not, so updates are clamped to it.
    pub fn ratio_bound(&self) -> f64 {
        let r = self.beta1 * self.beta1 / self.beta2;
        if r >= 1.0 {
            return f64::INFINITY;
        }
        (1.0 - self.beta1) / ((1.0 - self.beta2) * (1.0 - r)).sqrt()
    }
}

/// First (signed) and second (unsigned) moment of one tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorMoments {
    pub m: QuantizedMoment,
    pub v: QuantizedMoment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam8State {
    pub step: u64,
    pub block: usize,
    pub moments: Vec<TensorMoments>,
}

const STATE_MAGIC: &[u8; 4] = b"A8ST";
const STATE_VERSION: u32 = 1;

impl Adam8State {
    /// Bytes of the fixed global header in [`to_bytes`](Self::to_bytes).
    pub const HEADER_BYTES: usize = 4 + 4 + 8 + 4 + 4;
    /// Bytes of the per-tensor record header.
    pub const TENSOR_HEADER_BYTES: usize = 8;

    pub fn new(params: &ParamSet<f32>, block: usize) -> Self {
        Self {
            step: 0,
            block,
            moments: params
                .tensors()
                .iter()
                .map(|t| TensorMoments {
                    m: QuantizedMoment::zeros(t.len(), block, true),
                    v: QuantizedMoment::zeros(t.len(), block, false),
                })
                .collect(),
        }
    }

    /// Compact little-endian layout:
    ///
    /// ```text
    /// "A8ST" | version u32 | step u64 | block u32 | tensors u32
    /// per tensor: len u64 | m codes [len] | v codes [len] | m scales f32 [ceil(len/block)] | v scales f32 [..]
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.block as u32).to_le_bytes());
        out.extend_from_slice(&(self.moments.len() as u32).to_le_bytes());
        for tm in &self.moments {
            out.extend_from_slice(&(tm.m.len() as u64).to_le_bytes());
            out.extend_from_slice(&tm.m.codes);
            out.extend_from_slice(&tm.v.codes);
            for s in tm.m.scales.iter().chain(&tm.v.scales) {
                out.extend_from_slice(&s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(Error::Decode("bad optimizer state magic".into()));
        }
        let version = r.u32()?;
        if version != STATE_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "optimizer state version {version}"
            )));
        }
        let step = r.u64()?;
        let block = r.u32()? as usize;
        if block == 0 {
            return Err(Error::Decode("zero block size".into()));
        }
        let count = r.u32()? as usize;
        let mut moments = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u64()? as usize;
            let nb = len.div_ceil(block);
            let mc = r.take(len)?.to_vec();
            let vc = r.take(len)?.to_vec();
            let mut scales = Vec::with_capacity(2 * nb);
            for _ in 0..2 * nb {
                scales.push(f32::from_le_bytes(r.take(4)?.try_into().unwrap()));
            }
            let vs = scales.split_off(nb);
            moments.push(TensorMoments {
                m: QuantizedMoment {
                    codes: mc,
                    scales,
                    signed: true,
                    block,
                },
                v: QuantizedMoment {
                    codes: vc,
                    scales: vs,
                    signed: false,
                    block,
                },
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Decode("trailing bytes after optimizer state".into()));
        }
        Ok(Self {
            step,
            block,
            moments,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Decode("truncated optimizer state".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Adam with 8-bit block-quantized moments and fp32 master weights.
#[derive(Clone, Debug)]
pub struct Adam8 {
    pub config: AdamConfig,
    pub state: Adam8State,
}

impl Adam8 {
    pub fn new(params: &ParamSet<f32>, config: AdamConfig) -> Self {
        Self {
            state: Adam8State::new(params, config.block),
            config,
        }
    }

    pub fn from_state(config: AdamConfig, state: Adam8State) -> Self {
        Self { config, state }
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// One update: dequantize moments, apply the bias-corrected Adam rule in
    /// fp32/fp64, update the weights, requantize the moments.
    pub fn step(
        &mut self,
        params: &mut ParamSet<f32>,
        grads: &ParamSet<f32>,
        lr: f64,
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.state.moments.len() {
            return Err(Error::Shape(
                "params, grads and optimizer state disagree in tensor count".into(),
            ));
        }
        for ((name, p), g) in params.iter().zip(grads.tensors()) {
            if p.shape() != g.shape() {
                return Err(Error::Shape(format!("gradient shape differs for `{name}`")));
            }
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of `{name}`")));
            }
        }
        self.state.step += 1;
        let t = self.state.step as i32;
        let cfg = self.config;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let block = self.state.block;
        let bound = cfg.ratio_bound();

        params
            .tensors_mut()
            .par_iter_mut()
            .zip(grads.tensors().par_iter())
            .zip(self.state.moments.par_iter_mut())
            .for_each(|((p, g), tm)| {
                let ps = p.as_slice_mut().expect("contiguous parameter");
                let gs = g.as_slice().expect("contiguous gradient");
                let mut mbuf = vec![0.0f32; block];
                let mut vbuf = vec![0.0f32; block];
                for (b, (pchunk, gchunk)) in ps.chunks_mut(block).zip(gs.chunks(block)).enumerate()
                {
                    let n = pchunk.len();
                    let (mb, vb) = (&mut mbuf[..n], &mut vbuf[..n]);
                    tm.m.load_block(b, mb);
                    tm.v.load_block(b, vb);
                    for i in 0..n {
                        let gi = f64::from(gchunk[i]);
                        let m = cfg.beta1 * f64::from(mb[i]) + (1.0 - cfg.beta1) * gi;
                        let v = cfg.beta2 * f64::from(vb[i]) + (1.0 - cfg.beta2) * gi * gi;
                        mb[i] = m as f32;
                        vb[i] = v as f32;
                        let mhat = f64::from(mb[i]) / bc1;
                        let vhat = f64::from(vb[i]) / bc2;
                        let ratio = (mhat / (vhat.sqrt() + cfg.eps)).clamp(-bound, bound);
                        let delta = lr * ratio;
                        pchunk[i] = (f64::from(pchunk[i]) - delta) as f32;
                    }
                    tm.m.store_block(b, mb);
                    tm.v.store_block(b, vb);
                }
            });
        Ok(())
    }
}
