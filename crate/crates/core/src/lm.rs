//! Decoder-only transformer over text+image token sequences.
//!
//! Pre-LN GPT blocks with learned positional embeddings. Tensor names:
//!
//! ```text
//! tok_emb [V, d]            pos_emb [L, d]
//! layers.{i}.ln1.{weight,bias}
//! layers.{i}.attn.{q,k,v,o}.{weight [d,d], bias [d]}
//! layers.{i}.ln2.{weight,bias}
//! layers.{i}.ffn.fc1.{weight [d,f], bias [f]}
//! layers.{i}.ffn.fc2.{weight [f,d], bias [d]}
//! ln_f.{weight,bias}        head.{weight [d,V], bias [V]}
//! ```
//!
//! Two inference paths share the parameters: the autograd graph (training,
//! full-sequence scoring) and an incremental key/value cache (sampling).

use ndarray::{s, Array1, Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{gelu, log_sum_exp, Graph, Real, Var};
use crate::checkpoint::Checkpoint;
use crate::dataset::{Layout, SequenceSpec, TokenSequence};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, ParamSet};
use crate::optim::{clip_global_norm, Adam8, AdamConfig, OneCycleSchedule};
use crate::rng::DetRng;

pub const CHECKPOINT_KIND: &str = "lm";
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub spec: SequenceSpec,
}

impl LmConfig {
    /// 4 layers, 4 heads, width 128, 32 text + 64 image positions, K = 256.
    pub fn emojich(text_vocab: usize, layout: Layout) -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            spec: SequenceSpec {
                t_text: 32,
                t_image: 64,
                text_vocab,
                image_vocab: 256,
                layout,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(
                "d_model must be a positive multiple of n_heads".into(),
            ));
        }
        if self.spec.is_empty() || self.spec.text_vocab == 0 || self.spec.image_vocab == 0 {
            return Err(Error::Config("empty sequence spec".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm<T: Real> {
    pub config: LmConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> Lm<T> {
    pub fn init(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = DetRng::new(seed);
        let (d, f, v, l) = (
            config.d_model,
            config.d_ff,
            config.spec.vocab(),
            config.spec.len(),
        );
        let std = 0.02;
        let proj_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut p = ParamSet::new();
        p.insert("tok_emb", nn::normal(&mut rng, &[v, d], std));
        p.insert("pos_emb", nn::normal(&mut rng, &[l, d], std));
        for i in 0..config.n_layers {
            let pre = format!("layers.{i}");
            p.insert(format!("{pre}.ln1.weight"), nn::ones(&[d]));
            p.insert(format!("{pre}.ln1.bias"), nn::zeros(&[d]));
            for (name, s) in [("q", std), ("k", std), ("v", std), ("o", proj_std)] {
                p.insert(
                    format!("{pre}.attn.{name}.weight"),
                    nn::normal(&mut rng, &[d, d], s),
                );
                p.insert(format!("{pre}.attn.{name}.bias"), nn::zeros(&[d]));
            }
            p.insert(format!("{pre}.ln2.weight"), nn::ones(&[d]));
            p.insert(format!("{pre}.ln2.bias"), nn::zeros(&[d]));
            p.insert(
                format!("{pre}.ffn.fc1.weight"),
                nn::normal(&mut rng, &[d, f], std),
            );
            p.insert(format!("{pre}.ffn.fc1.bias"), nn::zeros(&[f]));
            p.insert(
                format!("{pre}.ffn.fc2.weight"),
                nn::normal(&mut rng, &[f, d], proj_std),
            );
            p.insert(format!("{pre}.ffn.fc2.bias"), nn::zeros(&[d]));
        }
        p.insert("ln_f.weight", nn::ones(&[d]));
        p.insert("ln_f.bias", nn::zeros(&[d]));
        p.insert("head.weight", nn::normal(&mut rng, &[d, v], std));
        p.insert("head.bias", nn::zeros(&[v]));
        Ok(Self { config, params: p })
    }

    pub fn cast<U: Real>(&self) -> Lm<U> {
        Lm {
            config: self.config,
            params: self.params.cast(),
        }
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        let spec = &self.config.spec;
        if ids.len() != spec.len() {
            return Err(Error::Shape(format!(
                "sequence length must be {}, got {}",
                spec.len(),
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= spec.vocab()) {
            return Err(Error::InvalidToken {
                id: bad,
                size: spec.vocab(),
            });
        }
        Ok(())
    }

    /// Graph forward: next-token logits `[L, V]` for a full-length id sequence.
    pub fn forward_graph(&self, g: &Graph<T>, p: &Bound<'_, T>, ids: &[usize]) -> Var {
        let cfg = &self.config;
        let positions: Vec<usize> = (0..ids.len()).collect();
        let mut x = g.add(
            g.embedding(p.var("tok_emb"), ids),
            g.embedding(p.var("pos_emb"), &positions),
        );
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        for i in 0..cfg.n_layers {
            let pre = format!("layers.{i}");
            let h = ln(g, p, &format!("{pre}.ln1"), x);
            let q = linear(g, p, &format!("{pre}.attn.q"), h);
            let k = linear(g, p, &format!("{pre}.attn.k"), h);
            let v = linear(g, p, &format!("{pre}.attn.v"), h);
            let heads: Vec<Var> = (0..cfg.n_heads)
                .map(|hd| {
                    let (qh, kh, vh) = (
                        g.slice_cols(q, hd * dh, dh),
                        g.slice_cols(k, hd * dh, dh),
                        g.slice_cols(v, hd * dh, dh),
                    );
                    let att = g.causal_softmax(g.matmul_nt(qh, kh), scale);
                    g.matmul(att, vh)
                })
                .collect();
            let o = linear(g, p, &format!("{pre}.attn.o"), g.concat_cols(&heads));
            x = g.add(x, o);
            let h = ln(g, p, &format!("{pre}.ln2"), x);
            let h = g.gelu(linear(g, p, &format!("{pre}.ffn.fc1"), h));
            x = g.add(x, linear(g, p, &format!("{pre}.ffn.fc2"), h));
        }
        let x = ln(g, p, "ln_f", x);
        linear(g, p, "head", x)
    }

    /// Full-sequence logits `[L, V]` (no gradient).
    pub fn forward(&self, seq: &TokenSequence) -> Result<Array2<T>> {
        self.logits_for_ids(&seq.ids)
    }

    pub fn logits_for_ids(&self, ids: &[usize]) -> Result<Array2<T>> {
        self.check_ids(ids)?;
        let g = Graph::new();
        let p = self.params.bind_constant(&g);
        let out = self.forward_graph(&g, &p, ids);
        let v = g.value(out);
        Ok(v.view()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap()
            .to_owned())
    }

    pub fn new_cache(&self) -> KvCache<T> {
        let (l, d) = (self.config.spec.len(), self.config.d_model);
        KvCache {
            keys: vec![Array2::zeros((l, d)); self.config.n_layers],
            values: vec![Array2::zeros((l, d)); self.config.n_layers],
            len: 0,
        }
    }

    /// Appends `id` at the next position and returns the logits predicting
    /// the token after it.
    pub fn feed(&self, cache: &mut KvCache<T>, id: usize) -> Result<Array1<T>> {
        let cfg = &self.config;
        if id >= cfg.spec.vocab() {
            return Err(Error::InvalidToken {
                id,
                size: cfg.spec.vocab(),
            });
        }
        let pos = cache.len;
        if pos >= cfg.spec.len() {
            return Err(Error::Contract(format!("cache full at {pos} positions")));
        }
        let w = |name: &str| {
            self.params
                .expect(name)
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap()
        };
        let b = |name: &str| {
            self.params
                .expect(name)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .unwrap()
        };
        let lin = |x: &Array1<T>, name: &str| {
            x.dot(&w(&format!("{name}.weight"))) + b(&format!("{name}.bias"))
        };
        let norm = |x: &Array1<T>, name: &str| {
            layer_norm_row(
                x.view(),
                b(&format!("{name}.weight")),
                b(&format!("{name}.bias")),
            )
        };

        let mut x = &w("tok_emb").row(id) + &w("pos_emb").row(pos);
        let dh = cfg.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        for i in 0..cfg.n_layers {
            let pre = format!("layers.{i}");
            let h = norm(&x, &format!("{pre}.ln1"));
            let q = lin(&h, &format!("{pre}.attn.q"));
            cache.keys[i]
                .row_mut(pos)
                .assign(&lin(&h, &format!("{pre}.attn.k")));
            cache.values[i]
                .row_mut(pos)
                .assign(&lin(&h, &format!("{pre}.attn.v")));
            let mut att = Array1::<T>::zeros(cfg.d_model);
            for hd in 0..cfg.n_heads {
                let cols = hd * dh..(hd + 1) * dh;
                let keys = cache.keys[i].slice(s![..=pos, cols.clone()]);
                let vals = cache.values[i].slice(s![..=pos, cols.clone()]);
                let scores = keys.dot(&q.slice(s![cols.clone()])).mapv(|v| v * scale);
                let mx = scores.iter().copied().fold(T::neg_infinity(), T::max);
                let e = scores.mapv(|v| (v - mx).exp());
                let z = e.sum();
                let mixed = e.dot(&vals).mapv(|v| v / z);
                att.slice_mut(s![cols]).assign(&mixed);
            }
            x = x + lin(&att, &format!("{pre}.attn.o"));
            let h = norm(&x, &format!("{pre}.ln2"));
            let h = lin(&h, &format!("{pre}.ffn.fc1")).mapv(gelu);
            x = x + lin(&h, &format!("{pre}.ffn.fc2"));
        }
        cache.len += 1;
        Ok(lin(&norm(&x, "ln_f"), "head"))
    }
}

/// Incremental attention state for one sequence.
#[derive(Clone, Debug)]
pub struct KvCache<T: Real> {
    keys: Vec<Array2<T>>,
    values: Vec<Array2<T>>,
    len: usize,
}

impl<T: Real> KvCache<T> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn linear<T: Real>(g: &Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Var {
    let y = g.matmul(x, p.var(&format!("{name}.weight")));
    g.add_row_bias(y, p.var(&format!("{name}.bias")))
}

fn ln<T: Real>(g: &Graph<T>, p: &Bound<'_, T>, name: &str, x: Var) -> Var {
    g.layer_norm(
        x,
        p.var(&format!("{name}.weight")),
        p.var(&format!("{name}.bias")),
        LN_EPS,
    )
}

fn layer_norm_row<T: Real>(
    x: ArrayView1<'_, T>,
    gamma: ArrayView1<'_, T>,
    beta: ArrayView1<'_, T>,
) -> Array1<T> {
    let n = T::c(x.len() as f64);
    let mean = x.sum() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    let is = T::one() / (var + T::c(LN_EPS)).sqrt();
    x.mapv(|v| (v - mean) * is) * gamma + beta
}

impl Lm<f32> {
    pub fn to_checkpoint(
        &self,
        trained_steps: u64,
        vocab_json: &str,
        extra: serde_json::Value,
    ) -> Checkpoint {
        Checkpoint::new(
            CHECKPOINT_KIND,
            serde_json::json!({
                "config": self.config,
                "trained_steps": trained_steps,
                "vocab": vocab_json,
                "training": extra,
            }),
            self.params.clone(),
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Config(format!(
                "expected lm checkpoint, got `{}`",
                ck.kind
            )));
        }
        let config: LmConfig = serde_json::from_value(ck.metadata["config"].clone())?;
        let reference = Self::init(config, 0)?;
        reference.params.check_congruent(&ck.tensors)?;
        Ok(Self {
            config,
            params: ck.tensors.clone(),
        })
    }
}

/// Optimizer steps recorded in an lm checkpoint's metadata.
pub fn checkpoint_trained_steps(ck: &Checkpoint) -> u64 {
    ck.metadata["trained_steps"].as_u64().unwrap_or(0)
}

// ------------------------------------------------------------------ loss

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_text: f64,
    pub w_image: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_text: 1.0,
            w_image: 1e3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = |w: f64| w.is_finite() && w >= 0.0;
        if !ok(self.w_text) || !ok(self.w_image) || self.w_text + self.w_image == 0.0 {
            return Err(Error::Config(
                "loss weights must be finite, non-negative and not both zero".into(),
            ));
        }
        Ok(())
    }
}

/// Targets and per-position weights; the weight follows the modality of the
/// *target* token, and positions without a target weigh 0.
pub fn position_weights(
    seq: &TokenSequence,
    spec: &SequenceSpec,
    w: &LossWeights,
) -> (Vec<Option<usize>>, Vec<f64>) {
    let targets = seq.targets();
    let weights = targets
        .iter()
        .map(|t| match t {
            None => 0.0,
            Some(id) if spec.is_image_id(*id) => w.w_image,
            Some(_) => w.w_text,
        })
        .collect();
    (targets, weights)
}

/// `sum_t w(t) * CE_t / sum_t w(t)` from precomputed logits.
pub fn weighted_ce_loss<T: Real>(
    logits: &Array2<T>,
    seq: &TokenSequence,
    spec: &SequenceSpec,
    w: &LossWeights,
) -> Result<f64> {
    w.validate()?;
    let (targets, weights) = position_weights(seq, spec, w);
    let norm: f64 = weights.iter().sum();
    if targets.iter().all(Option::is_none) || norm == 0.0 {
        return Err(Error::UndefinedLoss);
    }
    let mut total = 0.0;
    for (t, (target, wt)) in targets.iter().zip(&weights).enumerate() {
        if let Some(y) = *target {
            let row = logits.row(t);
            total += wt * (log_sum_exp(row.iter().map(|v| v.f64())) - row[y].f64());
        }
    }
    Ok(total / norm)
}

/// Weighted CE of a whole set, normalized by the total weight across it.
pub fn dataset_loss(lm: &Lm<f32>, seqs: &[TokenSequence], w: &LossWeights) -> Result<f64> {
    w.validate()?;
    let spec = lm.config.spec;
    let parts: Vec<Result<(f64, f64)>> = seqs
        .par_iter()
        .map(|s| {
            let logits = lm.forward(s)?;
            let (_, weights) = position_weights(s, &spec, w);
            let norm: f64 = weights.iter().sum();
            if norm == 0.0 {
                return Ok((0.0, 0.0));
            }
            Ok((weighted_ce_loss(&logits, s, &spec, w)? * norm, norm))
        })
        .collect();
    let (mut num, mut den) = (0.0, 0.0);
    for p in parts {
        let (a, b) = p?;
        num += a;
        den += b;
    }
    if den == 0.0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(num / den)
}

// ------------------------------------------------------------------ freezing

/// Per-tensor frozen flags, aligned with a parameter set by name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeMask {
    pub entries: Vec<(String, bool)>,
}

impl FreezeMask {
    pub fn from_fn<T: Real>(params: &ParamSet<T>, frozen: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: params
                .names()
                .iter()
                .map(|n| (n.clone(), frozen(n)))
                .collect(),
        }
    }

    /// Attention projections and feedforward weights frozen; embeddings,
    /// layer norms and the output head trainable.
    pub fn emojich<T: Real>(params: &ParamSet<T>) -> Self {
        Self::from_fn(params, |n| n.contains(".attn.") || n.contains(".ffn."))
    }

    pub fn none<T: Real>(params: &ParamSet<T>) -> Self {
        Self::from_fn(params, |_| false)
    }

    pub fn all<T: Real>(params: &ParamSet<T>) -> Self {
        Self::from_fn(params, |_| true)
    }

    pub fn is_frozen(&self, name: &str) -> Option<bool> {
        self.entries.iter().find(|(n, _)| n == name).map(|e| e.1)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter(|e| e.1).map(|e| e.0.as_str())
    }
}

/// Zeroes the gradients of frozen tensors.
pub fn apply_freeze<T: Real>(grads: &mut ParamSet<T>, mask: &FreezeMask) -> Result<()> {
    if grads.len() != mask.entries.len()
        || grads
            .names()
            .iter()
            .zip(&mask.entries)
            .any(|(a, (b, _))| a != b)
    {
        return Err(Error::Config(
            "freeze mask does not match the parameter names".into(),
        ));
    }
    for (t, (_, frozen)) in grads.tensors_mut().iter_mut().zip(&mask.entries) {
        if *frozen {
            t.fill(T::zero());
        }
    }
    Ok(())
}

// ------------------------------------------------------------------ training

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub start_lr: f64,
    pub max_lr: f64,
    pub final_lr: f64,
    pub warmup_frac: f64,
    pub clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl LmTrainConfig {
    /// Fine-tuning recipe: 40 epochs, batch 2, one-cycle 4e-7 / 1e-5 / 2e-8
    /// with 10% warmup, clip 1.0, image weight 10^3.
    pub fn emojich() -> Self {
        Self {
            epochs: 40,
            batch: 2,
            start_lr: 4e-7,
            max_lr: 1e-5,
            final_lr: 2e-8,
            warmup_frac: 0.1,
            clip: 1.0,
            weights: LossWeights::default(),
            seed: 42,
        }
    }

    /// Base-set pretraining with a conventional learning rate.
    pub fn pretrain() -> Self {
        Self {
            epochs: 20,
            batch: 8,
            start_lr: 1e-4,
            max_lr: 2e-3,
            final_lr: 1e-5,
            warmup_frac: 0.1,
            clip: 1.0,
            weights: LossWeights::default(),
            seed: 7,
        }
    }

    pub fn total_steps(&self, n_records: usize) -> usize {
        self.epochs * n_records.div_ceil(self.batch.max(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmReport {
    pub steps: Vec<StepRecord>,
    /// Weighted CE over the full training set before the first step.
    pub initial_loss: f64,
    /// Same measurement after the last step.
    pub final_loss: f64,
}

/// `epochs x batches` of forward, weighted CE, backward, freeze, clip, 8-bit
/// Adam and scheduler advance. Batch elements are differentiated in parallel
/// and reduced in a fixed order.
pub fn train(
    lm: &mut Lm<f32>,
    mask: &FreezeMask,
    seqs: &[TokenSequence],
    cfg: &LmTrainConfig,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<LmReport> {
    cfg.weights.validate()?;
    if seqs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    apply_freeze(&mut lm.params.zeros_like(), mask)?;
    for s in seqs {
        lm.check_ids(&s.ids)?;
    }
    let batch = cfg.batch.max(1);
    let total = cfg.total_steps(seqs.len());
    let schedule = OneCycleSchedule::new(
        cfg.start_lr,
        cfg.max_lr,
        cfg.final_lr,
        cfg.warmup_frac,
        total.max(2),
    )?;
    let mut opt = Adam8::new(&lm.params, AdamConfig::default());
    let mut rng = DetRng::new(cfg.seed);
    let spec = lm.config.spec;
    let weighted: Vec<(Vec<Option<usize>>, Vec<f32>, f64)> = seqs
        .iter()
        .map(|s| {
            let (t, w) = position_weights(s, &spec, &cfg.weights);
            let norm = w.iter().sum();
            (t, w.iter().map(|&v| v as f32).collect(), norm)
        })
        .collect();

    let mut report = LmReport {
        initial_loss: dataset_loss(lm, seqs, &cfg.weights)?,
        ..Default::default()
    };
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..seqs.len()).collect();
        rng.shuffle(&mut order);
        for chunk in order.chunks(batch) {
            let norm: f64 = chunk.iter().map(|&i| weighted[i].2).sum();
            if norm == 0.0 {
                return Err(Error::UndefinedLoss);
            }
            let model = &*lm;
            let parts: Vec<(f64, ParamSet<f32>)> = chunk
                .par_iter()
                .map(|&i| {
                    let g = Graph::new();
                    let p = model.params.bind(&g);
                    let logits = model.forward_graph(&g, &p, &seqs[i].ids);
                    let (targets, w, _) = &weighted[i];
                    let loss = g.weighted_ce(logits, targets, w, norm as f32);
                    let lv = f64::from(g.scalar(loss));
                    let mut grads = g.backward(loss);
                    (lv, p.gradients(&mut grads))
                })
                .collect();
            let loss: f64 = parts.iter().map(|p| p.0).sum();
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("lm loss at step {step}")));
            }
            let mut grads = nn::reduce_in_order(parts.into_iter().map(|p| p.1).collect())
                .expect("non-empty batch");
            apply_freeze(&mut grads, mask)?;
            clip_global_norm(&mut grads, cfg.clip);
            let lr = schedule.lr(step)?;
            opt.step(&mut lm.params, &grads, lr)?;
            let rec = StepRecord { step, loss, lr };
            on_step(&rec);
            report.steps.push(rec);
            step += 1;
        }
    }
    report.final_loss = dataset_loss(lm, seqs, &cfg.weights)?;
    Ok(report)
}

/// Fine-tuning with the layer-freezing recipe.
pub fn fine_tune(
    lm: &mut Lm<f32>,
    mask: &FreezeMask,
    seqs: &[TokenSequence],
    cfg: &LmTrainConfig,
    on_step: impl FnMut(&StepRecord),
) -> Result<LmReport> {
    train(lm, mask, seqs, cfg, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{BOS_TEXT, PAD};
    use ndarray::ArrayD;

    fn micro(layout: Layout) -> LmConfig {
        LmConfig {
            d_model: 4,
            n_layers: 2,
            n_heads: 2,
            d_ff: 8,
            spec: SequenceSpec {
                t_text: 3,
                t_image: 3,
                text_vocab: 6,
                image_vocab: 4,
                layout,
            },
        }
    }

    fn micro_seq(cfg: &LmConfig) -> TokenSequence {
        TokenSequence::build(&cfg.spec, &[BOS_TEXT, 4, 5], &[3, 0, 2]).unwrap()
    }

    /// Randomizes every tensor so layer norms and biases are exercised.
    fn jitter(lm: &mut Lm<f64>, seed: u64) {
        let mut r = DetRng::new(seed);
        for t in lm.params.tensors_mut() {
            t.mapv_inplace(|v| v + 0.3 * r.normal());
        }
    }

    /// Straight-line reference: explicit loops over positions, heads and features.
    fn reference_forward(lm: &Lm<f64>, ids: &[usize]) -> Vec<Vec<f64>> {
        let c = &lm.config;
        let p = |n: &str| lm.params.expect(n).clone();
        let (d, nh, dh, f) = (c.d_model, c.n_heads, c.head_dim(), c.d_ff);
        let l = ids.len();
        let tok = p("tok_emb");
        let pos = p("pos_emb");
        let mut x: Vec<Vec<f64>> = (0..l)
            .map(|t| (0..d).map(|j| tok[[ids[t], j]] + pos[[t, j]]).collect())
            .collect();
        let lnorm = |v: &[f64], g: &ArrayD<f64>, b: &ArrayD<f64>| -> Vec<f64> {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / v.len() as f64;
            (0..v.len())
                .map(|j| (v[j] - m) / (var + LN_EPS).sqrt() * g[[j]] + b[[j]])
                .collect()
        };
        let affine = |v: &[f64], w: &ArrayD<f64>, b: &ArrayD<f64>| -> Vec<f64> {
            let out = w.shape()[1];
            (0..out)
                .map(|o| b[[o]] + (0..v.len()).map(|i| v[i] * w[[i, o]]).sum::<f64>())
                .collect()
        };
        for i in 0..c.n_layers {
            let n = |s: &str| format!("layers.{i}.{s}");
            let h: Vec<Vec<f64>> = x
                .iter()
                .map(|r| lnorm(r, &p(&n("ln1.weight")), &p(&n("ln1.bias"))))
                .collect();
            let proj = |k: &str| -> Vec<Vec<f64>> {
                h.iter()
                    .map(|r| {
                        affine(
                            r,
                            &p(&n(&format!("attn.{k}.weight"))),
                            &p(&n(&format!("attn.{k}.bias"))),
                        )
                    })
                    .collect()
            };
            let (q, k, v) = (proj("q"), proj("k"), proj("v"));
            let mut att = vec![vec![0.0; d]; l];
            for t in 0..l {
                for hd in 0..nh {
                    let sc: Vec<f64> = (0..=t)
                        .map(|u| {
                            (0..dh)
                                .map(|j| q[t][hd * dh + j] * k[u][hd * dh + j])
                                .sum::<f64>()
                                / (dh as f64).sqrt()
                        })
                        .collect();
                    let mx = sc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = sc.iter().map(|s| (s - mx).exp()).sum();
                    for j in 0..dh {
                        att[t][hd * dh + j] = (0..=t)
                            .map(|u| (sc[u] - mx).exp() / z * v[u][hd * dh + j])
                            .sum();
                    }
                }
            }
            for t in 0..l {
                let o = affine(&att[t], &p(&n("attn.o.weight")), &p(&n("attn.o.bias")));
                for j in 0..d {
                    x[t][j] += o[j];
                }
                let h2 = lnorm(&x[t], &p(&n("ln2.weight")), &p(&n("ln2.bias")));
                let mut a = affine(&h2, &p(&n("ffn.fc1.weight")), &p(&n("ffn.fc1.bias")));
                assert_eq!(a.len(), f);
                for z in &mut a {
                    let u = *z;
                    *z = 0.5
                        * u
                        * (1.0
                            + ((2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u * u * u))
                                .tanh());
                }
                let o2 = affine(&a, &p(&n("ffn.fc2.weight")), &p(&n("ffn.fc2.bias")));
                for j in 0..d {
                    x[t][j] += o2[j];
                }
            }
        }
        x.iter()
            .map(|r| {
                affine(
                    &lnorm(r, &p("ln_f.weight"), &p("ln_f.bias")),
                    &p("head.weight"),
                    &p("head.bias"),
                )
            })
            .collect()
    }

    #[test]
    fn matches_straight_line_reference() {
        let cfg = micro(Layout::TextFirst);
        let mut lm = Lm::<f64>::init(cfg, 1).unwrap();
        jitter(&mut lm, 2);
        let seq = micro_seq(&cfg);
        let got = lm.forward(&seq).unwrap();
        let want = reference_forward(&lm, &seq.ids);
        assert_eq!(got.dim(), (6, 10));
        for t in 0..6 {
            for v in 0..10 {
                assert!((got[[t, v]] - want[t][v]).abs() <= 1e-12, "({t},{v})");
            }
        }
    }

    #[test]
    fn kv_cache_matches_graph() {
        let cfg = micro(Layout::TextFirst);
        let mut lm = Lm::<f64>::init(cfg, 3).unwrap();
        jitter(&mut lm, 4);
        let seq = micro_seq(&cfg);
        let full = lm.forward(&seq).unwrap();
        let mut cache = lm.new_cache();
        for (t, &id) in seq.ids.iter().enumerate() {
            let row = lm.feed(&mut cache, id).unwrap();
            for v in 0..10 {
                assert!((row[v] - full[[t, v]]).abs() < 1e-12);
            }
        }
        assert!(lm.feed(&mut cache, 0).is_err());
    }

    #[test]
    fn causality() {
        let cfg = LmConfig::emojich(40, Layout::TextFirst);
        let lm = Lm::<f32>::init(cfg, 5).unwrap();
        let mut r = DetRng::new(6);
        let ids: Vec<usize> = (0..cfg.spec.len())
            .map(|_| r.below(cfg.spec.vocab()))
            .collect();
        let base = lm.logits_for_ids(&ids).unwrap();
        assert_eq!(base.dim(), (96, 296));
        for t in [0, 31, 60] {
            let mut ids2 = ids.clone();
            for id in ids2.iter_mut().skip(t + 1) {
                *id = (*id + 7) % cfg.spec.vocab();
            }
            let other = lm.logits_for_ids(&ids2).unwrap();
            assert_eq!(base.slice(s![..=t, ..]), other.slice(s![..=t, ..]));
            assert_ne!(base.slice(s![t + 1.., ..]), other.slice(s![t + 1.., ..]));
        }
    }

    #[test]
    fn invalid_tokens_rejected() {
        let cfg = micro(Layout::TextFirst);
        let lm = Lm::<f64>::init(cfg, 1).unwrap();
        assert!(matches!(
            lm.logits_for_ids(&[0, 1, 2, 3, 4, 10]),
            Err(Error::InvalidToken { id: 10, size: 10 })
        ));
        assert!(matches!(lm.logits_for_ids(&[0, 1]), Err(Error::Shape(_))));
    }

    fn toy_spec() -> SequenceSpec {
        SequenceSpec {
            t_text: 2,
            t_image: 2,
            text_vocab: 2,
            image_vocab: 2,
            layout: Layout::TextFirst,
        }
    }

    #[test]
    fn hand_computed_three_position_loss() {
        // ids: [BOS, t, i0, i1] -> targets (text 1, image 2, image 3) at positions 0..3.
        let spec = toy_spec();
        let seq = TokenSequence::build(&spec, &[BOS_TEXT, 1], &[0, 1]).unwrap();
        let seq = TokenSequence {
            ids: vec![1, 1, 2, 3],
            ..seq
        };
        let logits = Array2::from_shape_vec(
            (4, 4),
            vec![
                0.0, 2.0, 0.0, 0.0, // target 1 (text)
                1.0, 0.0, 1.0, 0.0, // target 2 (image)
                0.0, 0.0, 0.0, 3.0, // target 3 (image)
                9.0, 9.0, 9.0, 9.0, // no target
            ],
        )
        .unwrap();
        let ce = |row: [f64; 4], y: usize| row.iter().map(|v| v.exp()).sum::<f64>().ln() - row[y];
        let c0 = ce([0.0, 2.0, 0.0, 0.0], 1);
        let c1 = ce([1.0, 0.0, 1.0, 0.0], 2);
        let c2 = ce([0.0, 0.0, 0.0, 3.0], 3);
        let want = (c0 + 1000.0 * c1 + 1000.0 * c2) / 2001.0;
        let got = weighted_ce_loss(&logits, &seq, &spec, &LossWeights::default()).unwrap();
        assert!((got - want).abs() < 1e-12);
        let uniform = weighted_ce_loss(
            &logits,
            &seq,
            &spec,
            &LossWeights {
                w_text: 1.0,
                w_image: 1.0,
            },
        )
        .unwrap();
        assert!((uniform - (c0 + c1 + c2) / 3.0).abs() < 1e-12);
        let scaled = weighted_ce_loss(
            &logits,
            &seq,
            &spec,
            &LossWeights {
                w_text: 3.0,
                w_image: 3000.0,
            },
        )
        .unwrap();
        assert!((scaled - got).abs() < 1e-12);
    }

    #[test]
    fn image_only_targets_are_weight_invariant() {
        let spec = SequenceSpec {
            layout: Layout::TextFirst,
            ..toy_spec()
        };
        // Text segment is [BOS, PAD]: the only targets are image tokens.
        let seq = TokenSequence::build(&spec, &[BOS_TEXT, PAD], &[1, 0]).unwrap();
        let mut r = DetRng::new(1);
        let logits = Array2::from_shape_simple_fn((4, 4), || r.normal());
        let a = weighted_ce_loss(
            &logits,
            &seq,
            &spec,
            &LossWeights {
                w_text: 1.0,
                w_image: 1.0,
            },
        )
        .unwrap();
        let b = weighted_ce_loss(&logits, &seq, &spec, &LossWeights::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn all_pad_is_undefined() {
        let spec = SequenceSpec {
            t_text: 3,
            t_image: 0,
            text_vocab: 4,
            image_vocab: 2,
            layout: Layout::TextFirst,
        };
        let seq = TokenSequence::build(&spec, &[BOS_TEXT, PAD, PAD], &[]).unwrap();
        let logits = Array2::<f64>::zeros((3, 6));
        assert!(matches!(
            weighted_ce_loss(&logits, &seq, &spec, &LossWeights::default()),
            Err(Error::UndefinedLoss)
        ));
        assert!(LossWeights {
            w_text: 0.0,
            w_image: 0.0
        }
        .validate()
        .is_err());
        assert!(LossWeights {
            w_text: -1.0,
            w_image: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn weighted_ce_gradients_match_finite_differences() {
        let cfg = micro(Layout::TextFirst);
        let mut lm = Lm::<f64>::init(cfg, 9).unwrap();
        jitter(&mut lm, 10);
        assert!(lm.params.num_elements() <= 2000);
        let seq = micro_seq(&cfg);
        for w in [
            LossWeights::default(),
            LossWeights {
                w_text: 1.0,
                w_image: 1.0,
            },
        ] {
            let (targets, weights) = position_weights(&seq, &cfg.spec, &w);
            let norm: f64 = weights.iter().sum();
            let loss_of = |params: &ParamSet<f64>| {
                let m = Lm {
                    config: cfg,
                    params: params.clone(),
                };
                let g = Graph::new();
                let p = m.params.bind(&g);
                let logits = m.forward_graph(&g, &p, &seq.ids);
                let l = g.weighted_ce(logits, &targets, &weights, norm);
                let v = g.scalar(l);
                let mut gr = g.backward(l);
                (v, p.gradients(&mut gr))
            };
            let (v0, grads) = loss_of(&lm.params);
            let direct = weighted_ce_loss(&lm.forward(&seq).unwrap(), &seq, &cfg.spec, &w).unwrap();
            assert!((v0 - direct).abs() < 1e-12);
            let h = 1e-4;
            for ti in 0..lm.params.len() {
                for idx in 0..lm.params.tensors()[ti].len() {
                    let at = |d: f64| {
                        let mut q = lm.params.clone();
                        q.tensors_mut()[ti].as_slice_mut().unwrap()[idx] += d;
                        loss_of(&q).0
                    };
                    let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
                    let an = grads.tensors()[ti].as_slice().unwrap()[idx];
                    let denom = fd.abs().max(an.abs());
                    if denom > 1e-8 {
                        let rel = (fd - an).abs() / denom;
                        assert!(
                            rel <= 1e-4,
                            "{}[{idx}] fd={fd} an={an}",
                            lm.params.names()[ti]
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn freeze_masks() {
        let cfg = micro(Layout::TextFirst);
        let lm = Lm::<f32>::init(cfg, 1).unwrap();
        let m = FreezeMask::emojich(&lm.params);
        assert_eq!(m.is_frozen("layers.0.attn.q.weight"), Some(true));
        assert_eq!(m.is_frozen("layers.1.ffn.fc2.bias"), Some(true));
        assert_eq!(m.is_frozen("layers.0.ln1.weight"), Some(false));
        assert_eq!(m.is_frozen("tok_emb"), Some(false));
        assert_eq!(m.is_frozen("head.weight"), Some(false));
        let mut grads = lm.params.clone();
        apply_freeze(&mut grads, &m).unwrap();
        assert!(grads
            .expect("layers.0.attn.k.weight")
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(grads.expect("tok_emb"), lm.params.expect("tok_emb"));
        let mut bad = m.clone();
        bad.entries.pop();
        assert!(matches!(
            apply_freeze(&mut grads, &bad),
            Err(Error::Config(_))
        ));
    }

    fn toy_data(cfg: &LmConfig, n: usize, seed: u64) -> Vec<TokenSequence> {
        let mut r = DetRng::new(seed);
        (0..n)
            .map(|_| {
                let a = 4 + r.below(2);
                let img: Vec<usize> = (0..cfg.spec.t_image)
                    .map(|j| (a + j) % cfg.spec.image_vocab)
                    .collect();
                TokenSequence::build(&cfg.spec, &[BOS_TEXT, a, PAD], &img).unwrap()
            })
            .collect()
    }

    #[test]
    fn training_freezes_and_is_deterministic() {
        let cfg = micro(Layout::TextFirst);
        let data = toy_data(&cfg, 6, 1);
        let tc = LmTrainConfig {
            epochs: 3,
            batch: 3,
            ..LmTrainConfig::pretrain()
        };
        let base = Lm::<f32>::init(cfg, 2).unwrap();
        let run = |mask: &FreezeMask| {
            let mut lm = base.clone();
            let r = train(&mut lm, mask, &data, &tc, |_| {}).unwrap();
            (lm, r)
        };
        let emo = FreezeMask::emojich(&base.params);
        let (a, ra) = run(&emo);
        let (b, rb) = run(&emo);
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        for (name, t) in a.params.iter() {
            let changed = t != base.params.expect(name);
            assert_eq!(changed, !emo.is_frozen(name).unwrap(), "{name}");
        }
        let (frozen, _) = run(&FreezeMask::all(&base.params));
        assert_eq!(frozen, base);
        assert_eq!(ra.steps.len(), 3 * 2);
        assert!(ra.final_loss < ra.initial_loss);
    }
}
