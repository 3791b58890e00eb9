//! Vector-quantized image codec.
//!
//! The encoder maps an `S x S` RGB image to a `G x G` grid of logits over a
//! `K`-entry codebook (`G = S / 4`). Training uses a Gumbel-Softmax relaxation
//! of the discrete choice (optionally straight-through); inference takes the
//! argmax. The decoder turns the selected codebook vectors back into four Haar
//! subbands per colour channel at `S x S` and an inverse DWT renders the
//! image at `2S x 2S`.

use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{argmax, softmax_rows, Graph, Real, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::imaging::{self, ImageBuffer};
use crate::nn::{self, Bound, ParamSet};
use crate::optim::{clip_global_norm, Adam8, AdamConfig, OneCycleSchedule};
use crate::rng::DetRng;

pub const CHECKPOINT_KIND: &str = "vq_codec";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    /// Encoder input side `S`; the decoder renders `2S`.
    pub input_side: usize,
    /// Codebook size `K`.
    pub codebook_size: usize,
    /// Codebook vector width `D`; also the encoder feature width.
    pub code_dim: usize,
    /// Channels of the first encoder block.
    pub enc_channels: usize,
    /// Channels of the two decoder upsampling blocks.
    pub dec_channels: [usize; 2],
    /// Multiplier on the negative squared distances used as logits.
    pub logit_scale: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            input_side: 32,
            codebook_size: 256,
            code_dim: 64,
            enc_channels: 32,
            dec_channels: [32, 16],
            logit_scale: 1.0,
        }
    }
}

impl CodecConfig {
    pub fn grid(&self) -> usize {
        self.input_side / 4
    }

    pub fn output_side(&self) -> usize {
        2 * self.input_side
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_side < 4 || !self.input_side.is_multiple_of(4) {
            return Err(Error::Config(
                "codec input side must be a positive multiple of 4".into(),
            ));
        }
        if !(self.logit_scale > 0.0 && self.logit_scale.is_finite()) {
            return Err(Error::Config("logit scale must be positive".into()));
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            return Err(Error::Config("codebook needs K >= 2 and D >= 1".into()));
        }
        Ok(())
    }
}

/// `G x G` grid of codebook indices, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CodebookGrid {
    pub side: usize,
    pub indices: Vec<usize>,
}

impl CodebookGrid {
    pub fn new(side: usize, indices: Vec<usize>, codebook_size: usize) -> Result<Self> {
        if indices.len() != side * side {
            return Err(Error::Shape(format!(
                "grid of side {side} needs {} indices, got {}",
                side * side,
                indices.len()
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= codebook_size) {
            return Err(Error::InvalidIndex {
                index: bad,
                size: codebook_size,
            });
        }
        Ok(Self { side, indices })
    }
}

/// How the quantization bottleneck is evaluated.
#[derive(Clone, Debug)]
pub enum Quantizer<T: Real> {
    /// `softmax((logits + noise) / tau)`; `noise` is `[G*G, K]`.
    Relaxed { tau: f64, noise: Array2<T> },
    /// Forward: one-hot argmax of the perturbed logits; backward: relaxed gradient.
    StraightThrough { tau: f64, noise: Array2<T> },
    /// Argmax of the clean logits; no gradient reaches the encoder.
    Hard,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqCodec<T: Real> {
    pub config: CodecConfig,
    pub params: ParamSet<T>,
}

const RES_BLOCKS: [&str; 2] = ["enc.res", "dec.res"];

impl<T: Real> VqCodec<T> {
    pub fn init(config: CodecConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = DetRng::new(seed);
        let (c1, d, k) = (config.enc_channels, config.code_dim, config.codebook_size);
        let [u1, u2] = config.dec_channels;
        let mut p = ParamSet::new();
        let mut conv =
            |p: &mut ParamSet<T>, name: &str, o: usize, i: usize, ks: usize, gain: f64| {
                let w: ArrayD<T> = nn::conv_weight(&mut rng, o, i, ks);
                p.insert(format!("{name}.weight"), w.mapv(|v| v * T::c(gain)));
                p.insert(format!("{name}.bias"), nn::zeros(&[o]));
            };
        conv(&mut p, "enc.conv1", c1, 3, 3, 1.0);
        conv(&mut p, "enc.conv2", d, c1, 3, 1.0);
        for block in RES_BLOCKS {
            conv(&mut p, &format!("{block}.conv1"), d, d, 3, 1.0);
            conv(&mut p, &format!("{block}.conv2"), d, d, 3, 0.1);
        }
        conv(&mut p, "dec.up1", u1, d, 3, 1.0);
        conv(&mut p, "dec.up2", u2, u1, 3, 1.0);
        conv(&mut p, "dec.out", 12, u2, 3, 0.5);
        p.insert("codebook", nn::normal(&mut rng, &[k, d], 1.0));
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Real>(&self) -> VqCodec<U> {
        VqCodec {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn check_image(&self, img: &ImageBuffer) -> Result<()> {
        let s = self.config.input_side;
        if img.width() != s || img.height() != s || img.channels() != 3 {
            return Err(Error::Shape(format!(
                "codec expects {s}x{s} RGB, got {}x{}x{}",
                img.width(),
                img.height(),
                img.channels()
            )));
        }
        Ok(())
    }

    /// Encoder trunk: `[3,S,S]` in [-1,1] to pre-quantization features `[D,G,G]`.
    fn encoder_trunk(&self, g: &Graph<T>, p: &Bound<'_, T>, x: Var) -> Var {
        let h = g.relu(conv(g, p, "enc.conv1", x, 2, 1));
        let h = g.relu(conv(g, p, "enc.conv2", h, 2, 1));
        res_block(g, p, "enc.res", h)
    }

    /// `[D,G,G]` features to `[G*G, K]` logits.
    ///
    /// Scores are negative squared distances to the codebook vectors (the
    /// per-cell `|h|^2` term is dropped; softmax and argmax ignore it), so the
    /// argmax is the nearest codebook entry.
    fn logits_from_features(&self, g: &Graph<T>, p: &Bound<'_, T>, h: Var) -> Var {
        let (n, d) = (self.config.grid().pow(2), self.config.code_dim);
        let cb = p.var("codebook");
        let cells = g.transpose(g.reshape(h, &[d, n]));
        let dots = g.matmul_nt(cells, cb);
        let ones = g.input(ArrayD::from_elem(IxDyn(&[d, 1]), T::one()));
        let sq = g.reshape(g.matmul(g.mul(cb, cb), ones), &[self.config.codebook_size]);
        let neg = g.scale(sq, T::c(-1.0));
        g.scale(
            g.add_row_bias(g.scale(dots, T::c(2.0)), neg),
            T::c(self.config.logit_scale),
        )
    }

    /// Pre-quantization features of every cell, `[G*G, D]`.
    pub fn cell_features(&self, img: &ImageBuffer) -> Result<Array2<T>> {
        self.check_image(img)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let h = self.encoder_trunk(&g, &p, g.input(image_to_tensor(img)));
        let (n, d) = (self.config.grid().pow(2), self.config.code_dim);
        let v = g.value(h);
        let flat = v
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, n))
            .unwrap();
        Ok(flat.t().to_owned())
    }

    /// Overwrites codebook rows `rows` with encoder features of randomly drawn
    /// cells of `images`, plus a little noise so duplicates separate.
    pub fn reseed_codes(
        &mut self,
        rows: &[usize],
        images: &[ImageBuffer],
        rng: &mut DetRng,
    ) -> Result<()> {
        if rows.is_empty() || images.is_empty() {
            return Ok(());
        }
        let n = self.config.grid().pow(2);
        let picks: Vec<(usize, usize)> = rows
            .iter()
            .map(|_| (rng.below(images.len()), rng.below(n)))
            .collect();
        let noise: Vec<f64> = (0..rows.len() * self.config.code_dim)
            .map(|_| rng.normal() * 0.01)
            .collect();
        let feats: Vec<Result<Array2<T>>> = picks
            .par_iter()
            .map(|&(i, _)| self.cell_features(&images[i]))
            .collect();
        let cb = self.params.get_mut("codebook").expect("codebook");
        for (r, ((&row, (_, cell)), f)) in rows.iter().zip(&picks).zip(feats).enumerate() {
            let f = f?;
            for j in 0..self.config.code_dim {
                cb[[row, j]] = f[(*cell, j)] + T::c(noise[r * self.config.code_dim + j]);
            }
        }
        Ok(())
    }

    /// Random init followed by a data-dependent codebook: every entry starts
    /// at the encoder feature of a random training cell.
    pub fn init_from_data(config: CodecConfig, seed: u64, images: &[ImageBuffer]) -> Result<Self> {
        let mut c = Self::init(config, seed)?;
        let mut rng = DetRng::with_stream(seed, 1);
        let rows: Vec<usize> = (0..config.codebook_size).collect();
        c.reseed_codes(&rows, images, &mut rng)?;
        Ok(c)
    }

    /// `[G*G, K]` (relaxed) one-hot to `[3, 2S, 2S]` output in [-1, 1] units.
    fn decoder(&self, g: &Graph<T>, p: &Bound<'_, T>, onehot: Var) -> Var {
        let gs = self.config.grid();
        let z = g.matmul(onehot, p.var("codebook"));
        let z = g.transpose(z);
        let z = g.reshape(z, &[self.config.code_dim, gs, gs]);
        let h = res_block(g, p, "dec.res", z);
        let h = g.relu(conv(g, p, "dec.up1", g.upsample2(h), 1, 1));
        let h = g.relu(conv(g, p, "dec.up2", g.upsample2(h), 1, 1));
        let sub = conv(g, p, "dec.out", h, 1, 1);
        g.haar_idwt(sub)
    }

    /// Full forward pass for training: returns `(logits [G*G,K], output [3,2S,2S])`.
    pub fn forward(&self, g: &Graph<T>, p: &Bound<'_, T>, x: Var, q: &Quantizer<T>) -> (Var, Var) {
        let h = self.encoder_trunk(g, p, x);
        let logits = self.logits_from_features(g, p, h);
        let code = match q {
            Quantizer::Relaxed { tau, noise } => {
                let y = g.add(logits, g.input(noise.clone().into_dyn()));
                g.softmax_rows(g.scale(y, T::c(1.0 / tau)))
            }
            Quantizer::StraightThrough { tau, noise } => {
                let y = g.add(logits, g.input(noise.clone().into_dyn()));
                let soft = g.softmax_rows(g.scale(y, T::c(1.0 / tau)));
                g.straight_through_onehot(soft)
            }
            Quantizer::Hard => {
                let lv = g.value(logits);
                let l2 = lv.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                g.input(onehot_rows(&l2).into_dyn())
            }
        };
        let out = self.decoder(g, p, code);
        (logits, out)
    }

    /// Per-cell unnormalized scores, shape `[G, G, K]`.
    pub fn encode(&self, img: &ImageBuffer) -> Result<Array3<T>> {
        self.check_image(img)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let x = g.input(image_to_tensor(img));
        let h = self.encoder_trunk(&g, &p, x);
        let l = self.logits_from_features(&g, &p, h);
        let gs = self.config.grid();
        let lv = g.value(l);
        Ok(lv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((gs, gs, self.config.codebook_size))
            .unwrap())
    }

    /// Inference-time tokenization: argmax of each cell's logits.
    pub fn encode_argmax(&self, img: &ImageBuffer) -> Result<CodebookGrid> {
        let logits = self.encode(img)?;
        let k = self.config.codebook_size;
        let gs = self.config.grid();
        let flat = logits.into_shape_with_order((gs * gs, k)).unwrap();
        let indices = flat
            .rows()
            .into_iter()
            .map(|r| argmax(r.iter().copied()))
            .collect();
        CodebookGrid::new(gs, indices, k)
    }

    /// Spatially averaged pre-quantization encoder activations (length `D`).
    pub fn features(&self, img: &ImageBuffer) -> Result<Vec<f64>> {
        self.check_image(img)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let x = g.input(image_to_tensor(img));
        let h = g.value(self.encoder_trunk(&g, &p, x));
        let d = self.config.code_dim;
        let flat = h
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((d, h.len() / d))
            .unwrap();
        Ok(flat
            .mean_axis(Axis(1))
            .unwrap()
            .iter()
            .map(|v| v.f64())
            .collect())
    }

    /// Renders a grid to a `2S x 2S` RGB image.
    pub fn decode(&self, grid: &CodebookGrid) -> Result<ImageBuffer> {
        let k = self.config.codebook_size;
        let gs = self.config.grid();
        let grid = CodebookGrid::new(grid.side, grid.indices.clone(), k)?;
        if grid.side != gs {
            return Err(Error::Shape(format!(
                "expected grid side {gs}, got {}",
                grid.side
            )));
        }
        let mut onehot = Array2::<T>::zeros((gs * gs, k));
        for (cell, &idx) in grid.indices.iter().enumerate() {
            onehot[(cell, idx)] = T::one();
        }
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.decoder(&g, &p, g.input(onehot.into_dyn()));
        Ok(tensor_to_image(&g.value(out)))
    }

    /// Hard-path reconstruction of an `S x S` image.
    pub fn reconstruct(&self, img: &ImageBuffer) -> Result<ImageBuffer> {
        self.decode(&self.encode_argmax(img)?)
    }
}

impl VqCodec<f32> {
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
                "expected codec checkpoint, got `{}`",
                ck.kind
            )));
        }
        let config: CodecConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let reference = Self::init(config, 0)?;
        reference.params.check_congruent(&ck.tensors)?;
        Ok(Self {
            config,
            params: ck.tensors.clone(),
        })
    }
}

fn conv<T: Real>(
    g: &Graph<T>,
    p: &Bound<'_, T>,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
) -> Var {
    g.conv2d(
        x,
        p.var(&format!("{name}.weight")),
        p.var(&format!("{name}.bias")),
        stride,
        pad,
    )
}

fn res_block<T: Real>(g: &Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Var {
    let h = g.relu(conv(g, p, &format!("{name}.conv1"), x, 1, 1));
    let h = conv(g, p, &format!("{name}.conv2"), h, 1, 1);
    g.add(x, h)
}

fn onehot_rows<T: Real>(l: &ndarray::ArrayView2<'_, T>) -> Array2<T> {
    let mut out = Array2::zeros(l.dim());
    for (i, row) in l.rows().into_iter().enumerate() {
        out[(i, argmax(row.iter().copied()))] = T::one();
    }
    out
}

/// `[3,H,W]` tensor with samples mapped to [-1, 1].
pub fn image_to_tensor<T: Real>(img: &ImageBuffer) -> ArrayD<T> {
    let (w, h, c) = (img.width(), img.height(), img.channels().min(3));
    let data = img.data();
    let ch = img.channels();
    ArrayD::from_shape_fn(IxDyn(&[c, h, w]), |i| {
        T::c(f64::from(data[(i[1] * w + i[2]) * ch + i[0]]) / 127.5 - 1.0)
    })
}

/// Inverse of [`image_to_tensor`] with rounding and clipping.
pub fn tensor_to_image<T: Real>(t: &ArrayD<T>) -> ImageBuffer {
    let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    ImageBuffer::from_fn(w, h, c, |x, y| {
        let mut px = [0u8; 4];
        for (ch, v) in px.iter_mut().enumerate().take(c) {
            *v = imaging::to_sample((t[[ch, y, x]].f64() + 1.0) * 127.5);
        }
        px
    })
    .expect("3-channel tensor")
}

// ------------------------------------------------------------------ Gumbel-Softmax

/// Relaxed one-hot `softmax((logits + noise) / temperature)`.
pub fn gumbel_softmax_with_noise(logits: &[f64], noise: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    let y: Vec<f64> = logits
        .iter()
        .zip(noise)
        .map(|(l, n)| (l + n) / temperature)
        .collect();
    let v = ndarray::ArrayView2::from_shape((1, y.len()), &y).unwrap();
    softmax_rows(&v).into_raw_vec_and_offset().0
}

/// Draws Gumbel noise from `rng` and returns the relaxed sample.
pub fn gumbel_softmax_sample(logits: &[f64], temperature: f64, rng: &mut DetRng) -> Vec<f64> {
    let noise: Vec<f64> = logits.iter().map(|_| rng.gumbel()).collect();
    gumbel_softmax_with_noise(logits, &noise, temperature)
}

/// Hard Gumbel-max draw: argmax of the perturbed logits.
pub fn gumbel_hard_sample(logits: &[f64], rng: &mut DetRng) -> usize {
    argmax(logits.iter().map(|l| l + rng.gumbel()))
}

// ------------------------------------------------------------------ training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub start_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub straight_through: bool,
    /// Re-seed codebook entries unused by the argmax encoding at the start of
    /// each of the first `restart_epochs` epochs (after the first).
    pub restart_epochs: usize,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch: 8,
            seed: 42,
            start_lr: 1e-4,
            max_lr: 1e-3,
            final_lr: 2e-5,
            warmup_frac: 0.1,
            clip: 1.0,
            tau_start: 1.0,
            tau_end: 1.0 / 16.0,
            straight_through: true,
            restart_epochs: 4,
        }
    }
}

impl CodecTrainConfig {
    /// Exponential anneal from `tau_start` to `tau_end` over `total` steps.
    pub fn tau(&self, step: usize, total: usize) -> f64 {
        if total <= 1 {
            return self.tau_end;
        }
        let f = step as f64 / (total - 1) as f64;
        self.tau_start * (self.tau_end / self.tau_start).powf(f)
    }
}

/// A training pair: encoder input at `S` and reconstruction target at `2S`.
#[derive(Clone, Debug)]
pub struct CodecExample {
    pub input: ImageBuffer,
    pub target: ImageBuffer,
}

impl CodecExample {
    /// Builds the pair from any RGB image by bicubic resizing to both sides.
    pub fn from_image(img: &ImageBuffer, config: &CodecConfig) -> Result<Self> {
        let rgb = if img.is_rgba() {
            imaging::flatten_alpha(img, imaging::DEFAULT_ALPHA_THRESHOLD)?
        } else {
            img.clone()
        };
        let fit = |side: usize| -> Result<ImageBuffer> {
            if rgb.width() == side && rgb.height() == side {
                Ok(rgb.clone())
            } else {
                imaging::resize_bicubic(&rgb, side, side)
            }
        };
        Ok(Self {
            input: fit(config.input_side)?,
            target: fit(config.output_side())?,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecReport {
    /// Hard-path reconstruction MSE (in [-1,1] units) before training and after each epoch.
    pub loss_curve: Vec<f64>,
    /// Mean hard-path PSNR (dB) at the same points.
    pub psnr_curve: Vec<f64>,
    /// Mean relaxed training loss per epoch.
    pub train_loss: Vec<f64>,
    pub steps: usize,
}

/// Hard-path evaluation: `(mean MSE in [-1,1] units, mean PSNR in dB)`.
pub fn evaluate_codec(codec: &VqCodec<f32>, data: &[CodecExample]) -> Result<(f64, f64)> {
    let results: Vec<Result<(f64, f64)>> = data
        .par_iter()
        .map(|ex| {
            let rec = codec.reconstruct(&ex.input)?;
            let a = image_to_tensor::<f64>(&rec);
            let b = image_to_tensor::<f64>(&ex.target);
            let mse = (&a - &b).mapv(|v| v * v).mean().unwrap();
            Ok((mse, imaging::psnr(&rec, &ex.target)?.min(100.0)))
        })
        .collect();
    let mut mse = 0.0;
    let mut psnr = 0.0;
    for r in results {
        let (m, p) = r?;
        mse += m;
        psnr += p;
    }
    let n = data.len() as f64;
    Ok((mse / n, psnr / n))
}

/// Trains the codec on reconstruction MSE through the Gumbel-Softmax bottleneck.
pub fn train_codec(
    codec: &mut VqCodec<f32>,
    data: &[CodecExample],
    cfg: &CodecTrainConfig,
    mut on_epoch: impl FnMut(usize, &CodecReport),
) -> Result<CodecReport> {
    if data.len() < 2 {
        return Err(Error::InsufficientSamples {
            needed: 2,
            got: data.len(),
        });
    }
    let batch = cfg.batch.max(1);
    let steps_per_epoch = data.len().div_ceil(batch);
    let total = (cfg.epochs * steps_per_epoch).max(2);
    let schedule = OneCycleSchedule::new(
        cfg.start_lr,
        cfg.max_lr,
        cfg.final_lr,
        cfg.warmup_frac,
        total.max(2),
    )?;
    let mut opt = Adam8::new(&codec.params, AdamConfig::default());
    let mut rng = DetRng::new(cfg.seed);
    let gs = codec.config.grid();
    let k = codec.config.codebook_size;

    let mut report = CodecReport::default();
    let (l0, p0) = evaluate_codec(codec, data)?;
    report.loss_curve.push(l0);
    report.psnr_curve.push(p0);

    let mut step = 0;
    let inputs: Vec<ImageBuffer> = data.iter().map(|e| e.input.clone()).collect();
    for epoch in 0..cfg.epochs {
        if epoch > 0 && epoch <= cfg.restart_epochs {
            let used = used_codes(codec, &inputs)?;
            let dead: Vec<usize> = (0..k).filter(|&i| !used[i]).collect();
            codec.reseed_codes(&dead, &inputs, &mut rng)?;
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(batch).enumerate() {
            let tau = cfg.tau(step, total);
            let noises: Vec<Array2<f32>> = chunk
                .iter()
                .map(|_| Array2::from_shape_simple_fn((gs * gs, k), || rng.gumbel() as f32))
                .collect();
            let codec_ref = &*codec;
            let parts: Vec<(f64, ParamSet<f32>)> = chunk
                .par_iter()
                .zip(noises.into_par_iter())
                .map(|(&i, noise)| {
                    let q = if cfg.straight_through {
                        Quantizer::StraightThrough { tau, noise }
                    } else {
                        Quantizer::Relaxed { tau, noise }
                    };
                    let g = Graph::new();
                    let p = codec_ref.params.bind(&g);
                    let x = g.input(image_to_tensor(&data[i].input));
                    let (_, out) = codec_ref.forward(&g, &p, x, &q);
                    let loss = g.mse(out, &image_to_tensor(&data[i].target));
                    let lv = f64::from(g.scalar(loss));
                    let mut grads = g.backward(loss);
                    (lv, p.gradients(&mut grads))
                })
                .collect();
            let n = parts.len() as f32;
            let mut loss_sum = 0.0;
            let mut grads_list = Vec::with_capacity(parts.len());
            for (l, gr) in parts {
                loss_sum += l;
                grads_list.push(gr);
            }
            if !loss_sum.is_finite() {
                return Err(Error::NonFinite(format!(
                    "codec loss at epoch {epoch}, batch {b}"
                )));
            }
            let mut grads = nn::reduce_in_order(grads_list).expect("non-empty batch");
            grads.scale(1.0 / n);
            clip_global_norm(&mut grads, cfg.clip);
            opt.step(&mut codec.params, &grads, schedule.lr(step)?)?;
            epoch_loss += loss_sum;
            step += 1;
        }
        report.train_loss.push(epoch_loss / data.len() as f64);
        let (l, p) = evaluate_codec(codec, data)?;
        report.loss_curve.push(l);
        report.psnr_curve.push(p);
        report.steps = step;
        on_epoch(epoch, &report);
    }
    Ok(report)
}

fn used_codes(codec: &VqCodec<f32>, images: &[ImageBuffer]) -> Result<Vec<bool>> {
    let grids: Vec<Result<CodebookGrid>> =
        images.par_iter().map(|i| codec.encode_argmax(i)).collect();
    let mut used = vec![false; codec.config.codebook_size];
    for g in grids {
        for i in g?.indices {
            used[i] = true;
        }
    }
    Ok(used)
}

/// Distinct codebook entries used by the argmax encoding of `images`.
pub fn codebook_usage(codec: &VqCodec<f32>, images: &[ImageBuffer]) -> Result<usize> {
    Ok(used_codes(codec, images)?.iter().filter(|&&u| u).count())
}
