//! Optimization: block-quantized 8-bit Adam, the one-cycle learning-rate
//! schedule and global-norm gradient clipping.

mod adam8;
mod clip;
mod quant;
mod schedule;

pub use adam8::{Adam8, Adam8State, AdamConfig, TensorMoments};
pub use clip::clip_global_norm;
pub use quant::{dequantize_block, quantize_block, QuantizedBlock, QuantizedMoment, DEFAULT_BLOCK};
pub use schedule::OneCycleSchedule;
