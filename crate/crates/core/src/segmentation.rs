//! Foreground/background segmentation for sticker export.
//!
//! A three-level U-shaped network (widths 16/32/64, skip connections, sigmoid
//! head) predicts an opacity mask; when its confidence is below a threshold,
//! a flood fill of the border-connected near-white region is used instead.

use std::collections::VecDeque;

use ndarray::{ArrayD, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Real, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{self, ImageBuffer};
use crate::nn::{self, Bound, ParamSet};
use crate::optim::{clip_global_norm, Adam8, AdamConfig, OneCycleSchedule};
use crate::rng::DetRng;
use crate::vq_codec::image_to_tensor;

pub const CHECKPOINT_KIND: &str = "segmentation";
pub const DEFAULT_THRESHOLD: f64 = 0.99;
pub const DEFAULT_WHITE_TOL: u8 = 16;

/// Per-pixel opacity in [0, 1] plus an image-level confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct AlphaMask {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f32>,
    pub confidence: f64,
}

impl AlphaMask {
    /// Builds a mask and computes confidence as the mean of `max(p, 1-p)`.
    pub fn from_probs(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "mask of {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(
                "mask values must lie in [0, 1]".into(),
            ));
        }
        let confidence = confidence(&values);
        Ok(Self {
            width,
            height,
            values,
            confidence,
        })
    }

    /// Binary mask with opacity 1 where `opaque(x, y)`.
    pub fn binary(width: usize, height: usize, opaque: impl Fn(usize, usize) -> bool) -> Self {
        let values = (0..width * height)
            .map(|i| {
                if opaque(i % width, i / width) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect();
        Self {
            width,
            height,
            values,
            confidence: 1.0,
        }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }

    /// 0/255 bytes, thresholded at 0.5.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.values
            .iter()
            .map(|&v| if v >= 0.5 { 255 } else { 0 })
            .collect()
    }

    /// Reads a 0/255 mask (any value >= 128 counts as opaque).
    pub fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::Shape(
                "mask byte count does not match its size".into(),
            ));
        }
        Ok(Self::binary(width, height, |x, y| {
            bytes[y * width + x] >= 128
        }))
    }

    pub fn save_png(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        imaging::write_gray_png(path, self.width, self.height, &self.to_bytes())
    }

    pub fn load_png(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let (w, h, data) = imaging::read_gray_png(path)?;
        Self::from_bytes(w, h, &data)
    }

    /// Fraction of pixels whose thresholded value agrees with `other`.
    pub fn pixel_accuracy(&self, other: &AlphaMask) -> Result<f64> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::InvalidArgument("mask sizes differ".into()));
        }
        let agree = self
            .values
            .iter()
            .zip(&other.values)
            .filter(|(a, b)| (**a >= 0.5) == (**b >= 0.5))
            .count();
        Ok(agree as f64 / self.values.len() as f64)
    }
}

/// Mean over pixels of `max(p, 1 - p)`.
pub fn confidence(values: &[f32]) -> f64 {
    if values.is_empty() {
        return 1.0;
    }
    values
        .iter()
        .map(|&p| f64::from(p.max(1.0 - p)))
        .sum::<f64>()
        / values.len() as f64
}

// ------------------------------------------------------------------ model

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegConfig {
    /// Side the input is resized to; must be a multiple of 4.
    pub input_side: usize,
    pub widths: [usize; 3],
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            widths: [16, 32, 64],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegModel<T: Real> {
    pub config: SegConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> SegModel<T> {
    pub fn init(config: SegConfig, seed: u64) -> Result<Self> {
        if config.input_side < 4 || !config.input_side.is_multiple_of(4) {
            return Err(Error::Config(
                "segmentation input side must be a multiple of 4".into(),
            ));
        }
        let [a, b, c] = config.widths;
        let mut rng = DetRng::new(seed);
        let mut p = ParamSet::new();
        for (name, o, i, k) in [
            ("down1", a, 3, 3),
            ("down2", b, a, 3),
            ("down3", c, b, 3),
            ("up2", b, c + b, 3),
            ("up1", a, b + a, 3),
            ("head", 1, a, 1),
        ] {
            p.insert(format!("{name}.weight"), nn::conv_weight(&mut rng, o, i, k));
            p.insert(format!("{name}.bias"), nn::zeros(&[o]));
        }
        Ok(Self { config, params: p })
    }

    /// `[3,S,S]` to logits `[1,S,S]`.
    pub fn forward_graph(&self, g: &Graph<T>, p: &Bound<'_, T>, x: Var) -> Var {
        let conv = |name: &str, x: Var, stride: usize, pad: usize| {
            g.conv2d(
                x,
                p.var(&format!("{name}.weight")),
                p.var(&format!("{name}.bias")),
                stride,
                pad,
            )
        };
        let d1 = g.relu(conv("down1", x, 1, 1));
        let d2 = g.relu(conv("down2", d1, 2, 1));
        let d3 = g.relu(conv("down3", d2, 2, 1));
        let u2 = g.relu(conv("up2", g.concat_channels(g.upsample2(d3), d2), 1, 1));
        let u1 = g.relu(conv("up1", g.concat_channels(g.upsample2(u2), d1), 1, 1));
        conv("head", u1, 1, 0)
    }

    fn model_input(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        crate::dataset::preprocess(img, self.config.input_side)
    }

    /// Probabilities at model resolution, row-major `S x S`.
    pub fn predict_probs(&self, img: &ImageBuffer) -> Result<Vec<f32>> {
        let x = self.model_input(img)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.forward_graph(&g, &p, g.input(image_to_tensor(&x)));
        Ok(g.value(out)
            .iter()
            .map(|&v| sigmoid(v.f64()) as f32)
            .collect())
    }

    /// Mask at the image's own size, bilinear between output pixel centres.
    /// Confidence is taken over the model-resolution output.
    pub fn predict_mask(&self, img: &ImageBuffer) -> Result<AlphaMask> {
        let probs = self.predict_probs(img)?;
        let s = self.config.input_side;
        let (w, h) = (img.width(), img.height());
        let axis = |i: usize, n: usize| {
            let t = ((i as f64 + 0.5) * s as f64 / n as f64 - 0.5).clamp(0.0, (s - 1) as f64);
            let i0 = t.floor() as usize;
            (i0, (i0 + 1).min(s - 1), (t - i0 as f64) as f32)
        };
        let values = (0..w * h)
            .map(|i| {
                let (x0, x1, fx) = axis(i % w, w);
                let (y0, y1, fy) = axis(i / w, h);
                let row = |y: usize| probs[y * s + x0] * (1.0 - fx) + probs[y * s + x1] * fx;
                row(y0) * (1.0 - fy) + row(y1) * fy
            })
            .collect();
        let mut mask = AlphaMask::from_probs(w, h, values)?;
        mask.confidence = confidence(&probs);
        Ok(mask)
    }
}

impl SegModel<f32> {
    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({ "config": self.config, "training": extra }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "expected segmentation checkpoint, got `{}`",
                ck.kind
            )));
        }
        let config: SegConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        Self::init(config, 0)?.params.check_congruent(&ck.tensors)?;
        Ok(Self {
            config,
            params: ck.tensors.clone(),
        })
    }
}

// ------------------------------------------------------------------ fallback and routing

/// Flood fill from the border across 4-connected near-white pixels; reached
/// pixels become transparent, everything else opaque.
pub fn contour_fallback(img: &ImageBuffer, white_tol: u8) -> AlphaMask {
    let (w, h) = (img.width(), img.height());
    let near_white =
        |x: usize, y: usize| img.pixel(x, y)[..3].iter().all(|&c| c >= 255 - white_tol);
    let mut reached = vec![false; w * h];
    let mut queue = VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if (x == 0 || y == 0 || x + 1 == w || y + 1 == h)
                && near_white(x, y)
                && !reached[y * w + x]
            {
                reached[y * w + x] = true;
                queue.push_back((x, y));
            }
        }
    }
    while let Some((x, y)) = queue.pop_front() {
        let mut visit = |nx: usize, ny: usize| {
            if !reached[ny * w + nx] && near_white(nx, ny) {
                reached[ny * w + nx] = true;
                queue.push_back((nx, ny));
            }
        };
        if x > 0 {
            visit(x - 1, y);
        }
        if x + 1 < w {
            visit(x + 1, y);
        }
        if y > 0 {
            visit(x, y - 1);
        }
        if y + 1 < h {
            visit(x, y + 1);
        }
    }
    AlphaMask::binary(w, h, |x, y| !reached[y * w + x])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Model,
    Fallback,
}

/// Model mask when its confidence reaches `threshold`, flood fill otherwise.
pub fn segment(
    model: &SegModel<f32>,
    img: &ImageBuffer,
    threshold: f64,
) -> Result<(AlphaMask, Regime)> {
    let rgb = rgb_view(img)?;
    let mask = model.predict_mask(&rgb)?;
    if mask.confidence >= threshold {
        Ok((mask, Regime::Model))
    } else {
        Ok((contour_fallback(&rgb, DEFAULT_WHITE_TOL), Regime::Fallback))
    }
}

fn rgb_view(img: &ImageBuffer) -> Result<ImageBuffer> {
    if img.is_rgba() {
        imaging::flatten_alpha(img, imaging::DEFAULT_ALPHA_THRESHOLD)
    } else {
        Ok(img.clone())
    }
}

/// RGB plus an alpha plane: hard (255 where mask >= 0.5) or soft (round(mask*255)).
pub fn compose_rgba(img: &ImageBuffer, mask: &AlphaMask, hard: bool) -> Result<ImageBuffer> {
    if (img.width(), img.height()) != (mask.width, mask.height) {
        return Err(Error::InvalidArgument(format!(
            "image is {}x{} but mask is {}x{}",
            img.width(),
            img.height(),
            mask.width,
            mask.height
        )));
    }
    ImageBuffer::from_fn(img.width(), img.height(), 4, |x, y| {
        let px = img.pixel(x, y);
        let m = mask.get(x, y);
        let a = if hard {
            if m >= 0.5 {
                255
            } else {
                0
            }
        } else {
            imaging::to_sample(f64::from(m) * 255.0)
        };
        [px[0], px[1], px[2], a]
    })
}

// ------------------------------------------------------------------ training

/// An image with its ground-truth or pseudo mask.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    pub image: ImageBuffer,
    pub mask: AlphaMask,
}

impl LabeledImage {
    /// RGBA sticker: RGB flattened onto white, mask from the alpha channel.
    pub fn from_rgba(img: &ImageBuffer) -> Result<Self> {
        if !img.is_rgba() {
            return Err(Error::InvalidArgument("sticker must be RGBA".into()));
        }
        let t = imaging::DEFAULT_ALPHA_THRESHOLD;
        Ok(Self {
            image: imaging::flatten_alpha(img, t)?,
            mask: AlphaMask::binary(img.width(), img.height(), |x, y| img.pixel(x, y)[3] >= t),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub start_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub seed: u64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            start_lr: 3e-4,
            max_lr: 3e-3,
            final_lr: 3e-5,
            warmup_frac: 0.1,
            clip: 1.0,
            seed: 17,
        }
    }
}

/// Binarized target at model resolution (area vote over each model pixel).
fn target_tensor(mask: &AlphaMask, side: usize) -> ArrayD<f32> {
    let (w, h) = (mask.width, mask.height);
    ArrayD::from_shape_fn(IxDyn(&[1, side, side]), |i| {
        let (y0, y1) = (
            i[1] * h / side,
            ((i[1] + 1) * h / side).max(i[1] * h / side + 1),
        );
        let (x0, x1) = (
            i[2] * w / side,
            ((i[2] + 1) * w / side).max(i[2] * w / side + 1),
        );
        let mut on = 0usize;
        for y in y0..y1.min(h) {
            for x in x0..x1.min(w) {
                on += usize::from(mask.get(x, y) >= 0.5);
            }
        }
        let n = (y1.min(h) - y0) * (x1.min(w) - x0);
        if 2 * on >= n {
            1.0
        } else {
            0.0
        }
    })
}

/// BCE training with 8-bit Adam, one-cycle schedule and clipping. Returns the
/// mean loss of each epoch.
pub fn train_seg(
    model: &mut SegModel<f32>,
    data: &[LabeledImage],
    cfg: &SegTrainConfig,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument(
            "segmentation training set is empty".into(),
        ));
    }
    let side = model.config.input_side;
    let prepared: Vec<(ArrayD<f32>, ArrayD<f32>)> = data
        .par_iter()
        .map(|d| {
            Ok((
                image_to_tensor(&model.model_input(&d.image)?),
                target_tensor(&d.mask, side),
            ))
        })
        .collect::<Result<_>>()?;
    let batch = cfg.batch.max(1);
    let total = cfg.epochs * data.len().div_ceil(batch);
    let schedule = OneCycleSchedule::new(
        cfg.start_lr,
        cfg.max_lr,
        cfg.final_lr,
        cfg.warmup_frac,
        total.max(2),
    )?;
    let mut opt = Adam8::new(&model.params, AdamConfig::default());
    let mut rng = DetRng::new(cfg.seed);
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(batch) {
            let m = &*model;
            let parts: Vec<(f64, ParamSet<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let g = Graph::new();
                    let p = m.params.bind(&g);
                    let logits = m.forward_graph(&g, &p, g.input(prepared[i].0.clone()));
                    let loss = g.bce_with_logits(logits, &prepared[i].1);
                    let lv = f64::from(g.scalar(loss));
                    let mut gr = g.backward(loss);
                    (lv, p.gradients(&mut gr))
                })
                .collect();
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!(
                    "segmentation loss at epoch {epoch}"
                )));
            }
            let mut grads = nn::reduce_in_order(parts.into_iter().map(|p| p.1).collect())
                .expect("non-empty batch");
            grads.scale(1.0 / chunk.len() as f32);
            clip_global_norm(&mut grads, cfg.clip);
            opt.step(&mut model.params, &grads, schedule.lr(step)?)?;
            sum += loss;
            step += 1;
        }
        curve.push(sum / data.len() as f64);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    pub threshold: f64,
    pub max_rounds: usize,
    pub plateau_frac: f64,
    pub train: SegTrainConfig,
}

impl Default for PseudoLabelConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            max_rounds: 10,
            plateau_frac: 0.01,
            train: SegTrainConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub added: usize,
    pub total: usize,
    /// Mean confidence over the pool predicted in this round (1.0 if empty).
    pub mean_confidence: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PseudoLabelState {
    pub rounds: Vec<RoundRecord>,
    pub train_set: Vec<LabeledImage>,
    /// Pool indices absorbed in each round.
    pub absorbed: Vec<Vec<usize>>,
}

/// Train, predict on the pool, absorb confident predictions (binarized at
/// 0.5), repeat until additions fall below `plateau_frac` of the training set
/// or `max_rounds` is reached.
///
/// `inject` runs after each round and may return hand-labelled items to add
/// before the next round.
pub fn pseudo_label_loop(
    model: &mut SegModel<f32>,
    initial: Vec<LabeledImage>,
    pool: &[ImageBuffer],
    cfg: &PseudoLabelConfig,
    mut inject: impl FnMut(&RoundRecord) -> Vec<LabeledImage>,
) -> Result<PseudoLabelState> {
    if initial.is_empty() {
        return Err(Error::InvalidArgument(
            "pseudo-labelling needs at least one labelled image".into(),
        ));
    }
    let mut state = PseudoLabelState {
        train_set: initial,
        ..Default::default()
    };
    let mut remaining: Vec<usize> = (0..pool.len()).collect();
    for round in 1..=cfg.max_rounds.max(1) {
        let mut tc = cfg.train.clone();
        tc.seed = cfg.train.seed.wrapping_add(round as u64);
        train_seg(model, &state.train_set, &tc)?;
        let preds: Vec<AlphaMask> = remaining
            .par_iter()
            .map(|&i| model.predict_mask(&pool[i]))
            .collect::<Result<_>>()?;
        let mean_confidence = if preds.is_empty() {
            1.0
        } else {
            preds.iter().map(|m| m.confidence).sum::<f64>() / preds.len() as f64
        };
        let before = state.train_set.len();
        let mut absorbed = Vec::new();
        let mut still = Vec::new();
        for (&i, m) in remaining.iter().zip(preds) {
            if m.confidence >= cfg.threshold {
                let bin = AlphaMask::binary(m.width, m.height, |x, y| m.get(x, y) >= 0.5);
                state.train_set.push(LabeledImage {
                    image: pool[i].clone(),
                    mask: bin,
                });
                absorbed.push(i);
            } else {
                still.push(i);
            }
        }
        remaining = still;
        let rec = RoundRecord {
            round,
            added: absorbed.len(),
            total: state.train_set.len(),
            mean_confidence,
        };
        state.rounds.push(rec);
        state.absorbed.push(absorbed);
        state.train_set.extend(inject(&rec));
        if (rec.added as f64) < cfg.plateau_frac * before as f64 || rec.added == 0 {
            break;
        }
    }
    Ok(state)
}
