//! Text-conditioned autoregressive sampling of image tokens.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{encode_caption, Layout, Vocabulary};
use crate::error::{Error, Result};
use crate::imaging::ImageBuffer;
use crate::lm::Lm;
use crate::rng::DetRng;
use crate::vq_codec::{CodebookGrid, VqCodec};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplingConfig {
    pub seed: u64,
    pub batch: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub temperature: f64,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            batch: 16,
            top_k: 2048,
            top_p: 0.995,
            temperature: 1.0,
        }
    }
}

impl SamplingConfig {
    /// Checks the field ranges; the error names the offending field.
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidArgument("batch must be at least 1".into()));
        }
        if self.top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::InvalidArgument("top_p must be in (0, 1]".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(
                "temperature must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Slack on the nucleus threshold so that masses equal to `top_p` up to
/// rounding count as reaching it.
const NUCLEUS_SLACK: f64 = 1e-12;

/// Temperature, softmax, top-k, nucleus prefix, renormalization.
///
/// Ties in probability are ordered by lower token id. The nucleus mass is
/// measured on the top-k distribution after renormalization.
pub fn filter_logits(logits: &[f64], top_k: usize, top_p: f64, temperature: f64) -> Vec<f64> {
    let k = logits.len();
    if k == 0 {
        return Vec::new();
    }
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logits
        .iter()
        .map(|&l| ((l - mx) / temperature).exp())
        .collect();
    let z: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= z);

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    let kept_k = top_k.clamp(1, k);
    let head = &order[..kept_k];
    let head_mass: f64 = head.iter().map(|&i| probs[i]).sum();

    let mut keep = head.len();
    if top_p < 1.0 {
        let mut cum = 0.0;
        for (n, &i) in head.iter().enumerate() {
            cum += probs[i] / head_mass;
            if cum >= top_p - NUCLEUS_SLACK {
                keep = n + 1;
                break;
            }
        }
    }
    let kept = &head[..keep];
    let mass: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut out = vec![0.0; k];
    for &i in kept {
        out[i] = probs[i] / mass;
    }
    out
}

/// Inverse-CDF draw from a normalized distribution.
pub fn sample_token(probs: &[f64], rng: &mut DetRng) -> Result<usize> {
    let total: f64 = probs.iter().sum();
    if probs.is_empty() || (total - 1.0).abs() > 1e-6 || probs.iter().any(|p| !(*p >= 0.0)) {
        return Err(Error::Contract(format!(
            "sampling needs a normalized distribution (sum {total})"
        )));
    }
    let u = rng.uniform();
    let mut cum = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            cum += p;
            last = i;
            if u < cum {
                return Ok(i);
            }
        }
    }
    Ok(last)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedImage {
    pub index: usize,
    pub grid: CodebookGrid,
    pub image: ImageBuffer,
}

/// Checks that the text-first model and the codec agree on token counts.
pub fn check_compatible(lm: &Lm<f32>, codec: &VqCodec<f32>) -> Result<()> {
    let spec = lm.config.spec;
    if spec.layout != Layout::TextFirst {
        return Err(Error::Config("generation needs a text-first model".into()));
    }
    if spec.image_vocab != codec.config.codebook_size || spec.t_image != codec.config.grid().pow(2)
    {
        return Err(Error::Config(format!(
            "model expects {} image tokens over K={}, codec has a {}x{} grid over K={}",
            spec.t_image,
            spec.image_vocab,
            codec.config.grid(),
            codec.config.grid(),
            codec.config.codebook_size
        )));
    }
    Ok(())
}

/// Samples the image-token grid for one batch element.
pub fn sample_grid(
    lm: &Lm<f32>,
    text_ids: &[usize],
    cfg: &SamplingConfig,
    index: usize,
) -> Result<Vec<usize>> {
    let spec = lm.config.spec;
    let mut rng = DetRng::with_stream(cfg.seed, index as u64);
    let mut cache = lm.new_cache();
    let mut logits = None;
    for &id in text_ids {
        logits = Some(lm.feed(&mut cache, id)?);
    }
    let mut tokens = Vec::with_capacity(spec.t_image);
    for step in 0..spec.t_image {
        let l = logits
            .take()
            .ok_or_else(|| Error::Contract("empty text prefix".into()))?;
        // Text ids are masked out by only looking at the image slice.
        let image: Vec<f64> = l
            .iter()
            .skip(spec.text_vocab)
            .map(|&v| f64::from(v))
            .collect();
        let probs = filter_logits(&image, cfg.top_k, cfg.top_p, cfg.temperature);
        let tok = sample_token(&probs, &mut rng)?;
        tokens.push(tok);
        if step + 1 < spec.t_image {
            logits = Some(lm.feed(&mut cache, spec.text_vocab + tok)?);
        }
    }
    Ok(tokens)
}

/// Generates `cfg.batch` images for `caption`, ordered by batch index.
pub fn generate(
    lm: &Lm<f32>,
    codec: &VqCodec<f32>,
    vocab: &Vocabulary,
    caption: &str,
    cfg: &SamplingConfig,
) -> Result<Vec<GeneratedImage>> {
    cfg.validate()?;
    check_compatible(lm, codec)?;
    if vocab.size() != lm.config.spec.text_vocab {
        return Err(Error::Config("vocabulary does not match the model".into()));
    }
    if crate::dataset::normalize_caption(caption).is_empty() {
        return Err(Error::InvalidArgument("caption is empty".into()));
    }
    let text = encode_caption(vocab, caption, lm.config.spec.t_text);
    (0..cfg.batch)
        .into_par_iter()
        .map(|i| {
            let tokens = sample_grid(lm, &text, cfg, i)?;
            let grid = CodebookGrid::new(codec.config.grid(), tokens, codec.config.codebook_size)?;
            let image = codec.decode(&grid)?;
            Ok(GeneratedImage {
                index: i,
                grid,
                image,
            })
        })
        .collect()
}
