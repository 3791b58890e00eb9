//! Desk-scale text-to-emoji generation.
//!
//! The crate trains a small vector-quantized image codec, a decoder-only
//! transformer over caption and image tokens, and a U-shaped segmentation
//! network, all on CPU. Everything is deterministic given a seed.
//!
//! Module map:
//!
//! * [`imaging`]: pixel buffers, PNG I/O, alpha flattening, bicubic resize, Haar DWT
//! * [`dataset`]: manifests, caption statistics, character tokenizer, synthetic glyphs
//! * [`autograd`]: a small reverse-mode tape over `ndarray` used by every model
//! * [`vq_codec`]: Gumbel-Softmax VQ autoencoder whose decoder ends in an inverse DWT
//! * [`lm`]: causal transformer, freezing, modality-weighted cross-entropy
//! * [`optim`]: block-quantized 8-bit Adam, one-cycle schedule, global-norm clipping
//! * [`sampler`]: temperature / top-k / top-p filtering and the generation loop
//! * [`eval`]: Fréchet distance between feature Gaussians, caption-loss reranking
//! * [`segmentation`]: U-Net masks, flood-fill fallback, pseudo-labeling, RGBA composition
//! * [`checkpoint`]: the binary tensor container shared by all models
//! * [`pipeline`]: the end-to-end steps shared by the CLI and the job service

pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod imaging;
pub mod lm;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod sampler;
pub mod segmentation;
pub mod vq_codec;

pub use error::{Error, Result};
pub use imaging::ImageBuffer;
