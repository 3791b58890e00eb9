//! End-to-end steps over a run directory. The CLI and the job service both
//! call these functions; neither has its own copy of the pipeline logic.
//!
//! Layout of a run directory:
//!
//! ```text
//! data/emoji/{images,masks}/  manifest.jsonl  stats.txt
//! data/base/images/           manifest.jsonl
//! data/vocab.json
//! checkpoints/{codec,lm_base,lm_emojich,lm_inverse,seg}.ckpt
//! reports/*.json  reports/pseudo_label.jsonl
//! generations/<id>/   segments/<id>/   packs/<name>/  packs/<name>.tar
//! artifacts.jsonl     every file written, with its SHA-256
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{sha256_hex, Checkpoint};
use crate::dataset::{
    self, EmojiRecord, Layout, Sample, SequenceSpec, Split, TokenSequence, Vocabulary,
};
use crate::error::{Error, Result};
use crate::eval::{self, CaptionScorer, GaussianSummary};
use crate::imaging::{self, ImageBuffer};
use crate::lm::{self, FreezeMask, Lm, LmConfig, LmReport, LmTrainConfig};
use crate::sampler::{self, SamplingConfig};
use crate::segmentation::{
    self, AlphaMask, LabeledImage, PseudoLabelConfig, Regime, SegConfig, SegModel,
};
use crate::vq_codec::{self, CodecConfig, CodecExample, CodecTrainConfig, VqCodec};

/// Environment variable naming the default run directory.
pub const RUN_DIR_ENV: &str = "EMOJICH_RUN_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSlot {
    Codec,
    LmBase,
    LmEmojich,
    LmInverse,
    Seg,
}

impl ModelSlot {
    pub const ALL: [ModelSlot; 5] = [
        ModelSlot::Codec,
        ModelSlot::LmBase,
        ModelSlot::LmEmojich,
        ModelSlot::LmInverse,
        ModelSlot::Seg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelSlot::Codec => "codec",
            ModelSlot::LmBase => "lm_base",
            ModelSlot::LmEmojich => "lm_emojich",
            ModelSlot::LmInverse => "lm_inverse",
            ModelSlot::Seg => "seg",
        }
    }

    /// CLI step that produces the checkpoint.
    pub fn producer(self) -> &'static str {
        match self {
            ModelSlot::Codec => "train-codec",
            ModelSlot::LmBase => "pretrain-lm",
            ModelSlot::LmEmojich => "finetune",
            ModelSlot::LmInverse => "rerank",
            ModelSlot::Seg => "train-seg",
        }
    }
}

/// A file written by a step, identified by its content hash.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the run root, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub id: String,
    pub trained_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn checkpoint_path(&self, slot: ModelSlot) -> PathBuf {
        self.path(format!("checkpoints/{}.ckpt", slot.name()))
    }

    /// `path` relative to the root, with `/` separators.
    pub fn rel(&self, path: &Path) -> String {
        let p = path.strip_prefix(&self.root).unwrap_or(path);
        p.components()
            .map(|c| c.as_os_str().to_string_lossy().into_owned())
            .collect::<Vec<_>>()
            .join("/")
    }

    fn mkdir(&self, rel: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = self.path(rel);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(dir)
    }

    /// Writes `bytes` atomically and appends the artifact to `artifacts.jsonl`.
    pub fn write_artifact(&self, step: &str, path: &Path, bytes: &[u8]) -> Result<Artifact> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let tmp = path.with_extension(format!(
            "{}.tmp",
            path.extension().and_then(|e| e.to_str()).unwrap_or("")
        ));
        fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        let artifact = Artifact {
            path: self.rel(path),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        };
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let log = self.path("artifacts.jsonl");
        let line = serde_json::json!({ "step": step, "artifact": artifact }).to_string();
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log)
            .map_err(|e| Error::io(&log, e))?;
        writeln!(f, "{line}").map_err(|e| Error::io(&log, e))?;
        Ok(artifact)
    }

    fn write_json(&self, step: &str, path: &Path, value: &impl Serialize) -> Result<Artifact> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write_artifact(step, path, text.as_bytes())
    }

    fn write_jsonl<T: Serialize>(&self, step: &str, path: &Path, rows: &[T]) -> Result<Artifact> {
        let mut text = String::new();
        for r in rows {
            text.push_str(&serde_json::to_string(r)?);
            text.push('\n');
        }
        self.write_artifact(step, path, text.as_bytes())
    }

    fn write_png(&self, step: &str, path: &Path, img: &ImageBuffer) -> Result<Artifact> {
        self.write_artifact(step, path, &imaging::encode_png(img)?)
    }

    fn save_checkpoint(&self, slot: ModelSlot, ck: &Checkpoint) -> Result<Artifact> {
        self.write_artifact(
            slot.producer(),
            &self.checkpoint_path(slot),
            &ck.to_bytes()?,
        )
    }

    pub fn load_checkpoint(&self, slot: ModelSlot) -> Result<Checkpoint> {
        let path = self.checkpoint_path(slot);
        if !path.is_file() {
            return Err(Error::MissingArtifact {
                path,
                step: slot.producer().into(),
            });
        }
        Checkpoint::load(path)
    }

    /// Content id and step count of each checkpoint present.
    pub fn checkpoint_versions(&self) -> BTreeMap<String, Option<CheckpointInfo>> {
        ModelSlot::ALL
            .iter()
            .map(|&slot| {
                let info =
                    Checkpoint::load(self.checkpoint_path(slot))
                        .ok()
                        .map(|ck| CheckpointInfo {
                            id: checkpoint_id(&ck),
                            trained_steps: ck
                                .metadata
                                .get("trained_steps")
                                .and_then(|v| v.as_u64()),
                        });
                (slot.name().to_string(), info)
            })
            .collect()
    }
}

fn checkpoint_id(ck: &Checkpoint) -> String {
    ck.to_bytes()
        .map(|b| sha256_hex(&b)[..12].to_string())
        .unwrap_or_default()
}

fn short_hash(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())[..12].to_string()
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

// ------------------------------------------------------------------ prepare-data

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareOptions {
    pub manifest: PathBuf,
    /// Stored image side (twice the codec input side).
    pub side: usize,
    pub base_count: usize,
    pub seed: u64,
    /// Reassigns splits when set; otherwise the manifest's splits are kept.
    pub val_frac: Option<f64>,
}

impl PrepareOptions {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            side: 64,
            base_count: 192,
            seed: 42,
            val_frac: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub emoji: usize,
    pub train: usize,
    pub val: usize,
    pub base: usize,
    pub vocab_size: usize,
    pub unique_captions: usize,
    pub short_caption_fraction: f64,
}

/// Mask from the alpha channel (opaque where alpha >= 128, sampled nearest),
/// or the flood-fill rule for images without alpha.
fn sticker_mask(img: &ImageBuffer, side: usize) -> Result<AlphaMask> {
    if !img.is_rgba() {
        return Ok(segmentation::contour_fallback(
            &dataset::preprocess(img, side)?,
            segmentation::DEFAULT_WHITE_TOL,
        ));
    }
    let (w, h) = (img.width(), img.height());
    Ok(AlphaMask::binary(side, side, |x, y| {
        img.pixel(x * w / side, y * h / side)[3] >= imaging::DEFAULT_ALPHA_THRESHOLD
    }))
}

pub fn prepare_data(run: &RunDir, opts: &PrepareOptions) -> Result<PrepareReport> {
    const STEP: &str = "prepare-data";
    if opts.side < 8 || !opts.side.is_multiple_of(8) {
        return Err(Error::InvalidArgument(
            "image side must be a positive multiple of 8".into(),
        ));
    }
    let mut records = dataset::load_manifest(&opts.manifest)?;
    if records.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, got: 0 });
    }
    if let Some(f) = opts.val_frac {
        if !(0.0..1.0).contains(&f) {
            return Err(Error::InvalidArgument("val_frac must lie in [0, 1)".into()));
        }
        dataset::split_records(&mut records, f, opts.seed);
    }
    let emoji_dir = run.mkdir("data/emoji")?;
    let processed: Vec<(ImageBuffer, AlphaMask)> = records
        .par_iter()
        .map(|r| {
            let img = imaging::read_png(&r.image_path)?;
            Ok((
                dataset::preprocess(&img, opts.side)?,
                sticker_mask(&img, opts.side)?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut out_records = Vec::with_capacity(records.len());
    for (i, (r, (img, mask))) in records.iter().zip(&processed).enumerate() {
        let image_path = emoji_dir.join(format!("images/emoji_{i:04}.png"));
        run.write_png(STEP, &image_path, img)?;
        let mask_path = emoji_dir.join(format!("masks/emoji_{i:04}.png"));
        run.write_artifact(
            STEP,
            &mask_path,
            &imaging::encode_gray_png(mask.width, mask.height, &mask.to_bytes())?,
        )?;
        out_records.push(EmojiRecord {
            image_path,
            caption: r.caption.clone(),
            split: r.split,
        });
    }
    let manifest_path = emoji_dir.join("manifest.jsonl");
    dataset::write_manifest(&manifest_path, &out_records)?;
    run.write_artifact(
        STEP,
        &manifest_path,
        &fs::read(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?,
    )?;
    let stats = dataset::caption_stats(records.iter().map(|r| r.caption.as_str()));
    run.write_artifact(
        STEP,
        &emoji_dir.join("stats.txt"),
        stats.to_text().as_bytes(),
    )?;

    let base = dataset::make_synthetic_base_set(opts.seed, opts.base_count.max(1), opts.side)?;
    let base_dir = run.mkdir("data/base")?;
    let mut base_records = Vec::with_capacity(base.len());
    for (i, s) in base.iter().enumerate() {
        let p = base_dir.join(format!("images/base_{i:04}.png"));
        run.write_png(STEP, &p, &s.image)?;
        base_records.push(EmojiRecord {
            image_path: p,
            caption: s.caption.clone(),
            split: Split::Train,
        });
    }
    let base_manifest = base_dir.join("manifest.jsonl");
    dataset::write_manifest(&base_manifest, &base_records)?;
    run.write_artifact(
        STEP,
        &base_manifest,
        &fs::read(&base_manifest).map_err(|e| Error::io(&base_manifest, e))?,
    )?;

    let vocab = dataset::build_vocab(
        records
            .iter()
            .map(|r| r.caption.as_str())
            .chain(base.iter().map(|s| s.caption.as_str())),
    );
    run.write_artifact(
        STEP,
        &run.path("data/vocab.json"),
        vocab.to_json()?.as_bytes(),
    )?;

    let train = records.iter().filter(|r| r.split == Split::Train).count();
    let report = PrepareReport {
        emoji: records.len(),
        train,
        val: records.len() - train,
        base: base.len(),
        vocab_size: vocab.size(),
        unique_captions: stats.unique,
        short_caption_fraction: stats.short_fraction(),
    };
    run.write_json(STEP, &run.path("reports/prepare.json"), &report)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedEmoji {
    pub caption: String,
    pub split: Split,
    pub image: ImageBuffer,
    pub mask: AlphaMask,
}

#[derive(Clone, Debug)]
pub struct PreparedData {
    pub emoji: Vec<PreparedEmoji>,
    pub base: Vec<Sample>,
    pub vocab: Vocabulary,
}

impl PreparedData {
    pub fn emoji_split(&self, split: Split) -> impl Iterator<Item = &PreparedEmoji> {
        self.emoji.iter().filter(move |e| e.split == split)
    }
}

pub fn load_prepared(run: &RunDir) -> Result<PreparedData> {
    let vocab_path = run.path("data/vocab.json");
    if !vocab_path.is_file() {
        return Err(Error::MissingArtifact {
            path: vocab_path,
            step: "prepare-data".into(),
        });
    }
    let vocab = Vocabulary::from_json(
        &fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?,
    )?;
    let records = dataset::load_manifest(run.path("data/emoji/manifest.jsonl"))?;
    let emoji = records
        .par_iter()
        .map(|r| {
            let image = imaging::read_png(&r.image_path)?;
            let mask_path = r
                .image_path
                .parent()
                .and_then(Path::parent)
                .map(|d| {
                    d.join("masks")
                        .join(r.image_path.file_name().unwrap_or_default())
                })
                .unwrap_or_default();
            Ok(PreparedEmoji {
                caption: r.caption.clone(),
                split: r.split,
                mask: AlphaMask::load_png(&mask_path)?,
                image,
            })
        })
        .collect::<Result<_>>()?;
    let base = dataset::load_manifest(run.path("data/base/manifest.jsonl"))?
        .par_iter()
        .map(|r| {
            Ok(Sample {
                caption: r.caption.clone(),
                image: imaging::read_png(&r.image_path)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(PreparedData { emoji, base, vocab })
}

// ------------------------------------------------------------------ codec

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecStepOptions {
    pub config: CodecConfig,
    pub train: CodecTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecStepReport {
    /// Mean PSNR over every emoji image (train and validation).
    pub psnr_emoji: f64,
    pub psnr_val: Option<f64>,
    /// Training-set PSNR, index 0 before training.
    pub psnr_curve: Vec<f64>,
    /// Codebook entries used by the argmax encoding of the training images.
    pub codebook_usage: usize,
    pub steps: usize,
    pub checkpoint: Artifact,
}

fn codec_examples<'a>(
    images: impl Iterator<Item = &'a ImageBuffer>,
    config: &CodecConfig,
) -> Result<Vec<CodecExample>> {
    images
        .map(|i| CodecExample::from_image(i, config))
        .collect()
}

/// Trains the codec on the base set plus the emoji training split.
pub fn train_codec(run: &RunDir, opts: &CodecStepOptions) -> Result<CodecStepReport> {
    opts.config.validate()?;
    let data = load_prepared(run)?;
    let images = data
        .base
        .iter()
        .map(|s| &s.image)
        .chain(data.emoji_split(Split::Train).map(|e| &e.image));
    let examples = codec_examples(images, &opts.config)?;
    let inputs: Vec<ImageBuffer> = examples.iter().map(|e| e.input.clone()).collect();
    let mut codec = VqCodec::init_from_data(opts.config, opts.train.seed, &inputs)?;
    let report = vq_codec::train_codec(&mut codec, &examples, &opts.train, |epoch, r| {
        log::info!(
            "codec epoch {}: train loss {:.5}, psnr {:.2} dB",
            epoch + 1,
            r.train_loss[epoch],
            r.psnr_curve[epoch + 1]
        );
    })?;
    let all = codec_examples(data.emoji.iter().map(|e| &e.image), &opts.config)?;
    let (_, psnr_emoji) = vq_codec::evaluate_codec(&codec, &all)?;
    let val = codec_examples(data.emoji_split(Split::Val).map(|e| &e.image), &opts.config)?;
    let psnr_val = if val.is_empty() {
        None
    } else {
        Some(vq_codec::evaluate_codec(&codec, &val)?.1)
    };
    let usage = vq_codec::codebook_usage(&codec, &inputs)?;
    let ck = codec.to_checkpoint(serde_json::json!({ "options": opts, "report": report }));
    let checkpoint = run.save_checkpoint(ModelSlot::Codec, &ck)?;
    let out = CodecStepReport {
        psnr_emoji,
        psnr_val,
        psnr_curve: report.psnr_curve,
        codebook_usage: usage,
        steps: report.steps,
        checkpoint,
    };
    run.write_json("train-codec", &run.path("reports/codec.json"), &out)?;
    Ok(out)
}

pub fn load_codec(run: &RunDir) -> Result<VqCodec<f32>> {
    VqCodec::from_checkpoint(&run.load_checkpoint(ModelSlot::Codec)?)
}

// ------------------------------------------------------------------ language models

/// Transformer shape; the sequence spec follows from the vocabulary and codec.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LmArch {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub t_text: usize,
}

impl Default for LmArch {
    fn default() -> Self {
        let c = LmConfig::emojich(1, Layout::TextFirst);
        Self {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            d_ff: c.d_ff,
            t_text: c.spec.t_text,
        }
    }
}

impl LmArch {
    pub fn config(
        &self,
        vocab: &Vocabulary,
        codec: &CodecConfig,
        layout: Layout,
    ) -> Result<LmConfig> {
        if self.t_text < 2 {
            return Err(Error::InvalidArgument("t_text must be at least 2".into()));
        }
        let c = LmConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            spec: SequenceSpec {
                t_text: self.t_text,
                t_image: codec.grid() * codec.grid(),
                text_vocab: vocab.size(),
                image_vocab: codec.codebook_size,
                layout,
            },
        };
        c.validate()?;
        Ok(c)
    }
}

fn sequences<'a>(
    codec: &VqCodec<f32>,
    vocab: &Vocabulary,
    spec: &SequenceSpec,
    items: impl Iterator<Item = (&'a str, &'a ImageBuffer)>,
) -> Result<Vec<TokenSequence>> {
    let items: Vec<_> = items.collect();
    items
        .par_iter()
        .map(|(caption, img)| {
            let grid = codec.encode_argmax(&dataset::preprocess(img, codec.config.input_side)?)?;
            let text = dataset::encode_caption(vocab, caption, spec.t_text);
            TokenSequence::build(spec, &text, &grid.indices)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmStepOptions {
    pub arch: LmArch,
    pub train: LmTrainConfig,
    pub init_seed: u64,
}

impl LmStepOptions {
    pub fn pretrain() -> Self {
        Self {
            arch: LmArch::default(),
            train: LmTrainConfig::pretrain(),
            init_seed: 1,
        }
    }

    pub fn inverse() -> Self {
        Self {
            init_seed: 2,
            ..Self::pretrain()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmStepReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps: usize,
    pub trained_steps: u64,
    pub frozen: Vec<String>,
    pub checkpoint: Artifact,
}

fn finish_lm(
    run: &RunDir,
    slot: ModelSlot,
    lm: &Lm<f32>,
    vocab: &Vocabulary,
    trained_steps: u64,
    frozen: Vec<String>,
    report: &LmReport,
    options: serde_json::Value,
) -> Result<LmStepReport> {
    let extra = serde_json::json!({
        "options": options,
        "initial_loss": report.initial_loss,
        "final_loss": report.final_loss,
        "losses": report.steps.iter().map(|s| s.loss).collect::<Vec<_>>(),
    });
    let ck = lm.to_checkpoint(trained_steps, &vocab.to_json()?, extra);
    let checkpoint = run.save_checkpoint(slot, &ck)?;
    let out = LmStepReport {
        initial_loss: report.initial_loss,
        final_loss: report.final_loss,
        steps: report.steps.len(),
        trained_steps,
        frozen,
        checkpoint,
    };
    run.write_json(
        slot.producer(),
        &run.path(format!("reports/{}.json", slot.name())),
        &out,
    )?;
    Ok(out)
}

fn log_step(name: &'static str, every: usize) -> impl FnMut(&lm::StepRecord) {
    move |r| {
        if r.step % every.max(1) == 0 {
            log::info!(
                "{name} step {}: loss {:.5}, lr {:.3e}",
                r.step,
                r.loss,
                r.lr
            );
        }
    }
}

/// Trains the text-first base model on the synthetic glyph set, all tensors free.
pub fn pretrain_lm(run: &RunDir, opts: &LmStepOptions) -> Result<LmStepReport> {
    let data = load_prepared(run)?;
    let codec = load_codec(run)?;
    let config = opts
        .arch
        .config(&data.vocab, &codec.config, Layout::TextFirst)?;
    let seqs = sequences(
        &codec,
        &data.vocab,
        &config.spec,
        data.base.iter().map(|s| (s.caption.as_str(), &s.image)),
    )?;
    let mut lm = Lm::<f32>::init(config, opts.init_seed)?;
    let mask = FreezeMask::none(&lm.params);
    let report = lm::train(&mut lm, &mask, &seqs, &opts.train, log_step("pretrain", 50))?;
    let steps = report.steps.len() as u64;
    finish_lm(
        run,
        ModelSlot::LmBase,
        &lm,
        &data.vocab,
        steps,
        vec![],
        &report,
        serde_json::to_value(opts)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneOptions {
    pub train: LmTrainConfig,
    /// Freeze attention and feed-forward tensors.
    pub freeze: bool,
}

impl Default for FinetuneOptions {
    fn default() -> Self {
        Self {
            train: LmTrainConfig::emojich(),
            freeze: true,
        }
    }
}

/// Fine-tunes the base model on the emoji training split.
pub fn finetune(run: &RunDir, opts: &FinetuneOptions) -> Result<LmStepReport> {
    let data = load_prepared(run)?;
    let codec = load_codec(run)?;
    let base = run.load_checkpoint(ModelSlot::LmBase)?;
    let base_steps = lm::checkpoint_trained_steps(&base);
    let mut lm = Lm::from_checkpoint(&base)?;
    if lm.config.spec.text_vocab != data.vocab.size() {
        return Err(Error::Config(
            "base model vocabulary differs from the prepared data".into(),
        ));
    }
    sampler::check_compatible(&lm, &codec)?;
    let seqs = sequences(
        &codec,
        &data.vocab,
        &lm.config.spec,
        data.emoji_split(Split::Train)
            .map(|e| (e.caption.as_str(), &e.image)),
    )?;
    let mask = if opts.freeze {
        FreezeMask::emojich(&lm.params)
    } else {
        FreezeMask::none(&lm.params)
    };
    let frozen = mask.frozen_names().map(String::from).collect();
    let report = lm::fine_tune(&mut lm, &mask, &seqs, &opts.train, log_step("finetune", 50))?;
    let steps = base_steps + report.steps.len() as u64;
    finish_lm(
        run,
        ModelSlot::LmEmojich,
        &lm,
        &data.vocab,
        steps,
        frozen,
        &report,
        serde_json::to_value(opts)?,
    )
}

/// Trains the image-first model used for caption-loss reranking.
pub fn train_inverse(run: &RunDir, opts: &LmStepOptions) -> Result<LmStepReport> {
    let data = load_prepared(run)?;
    let codec = load_codec(run)?;
    let config = opts
        .arch
        .config(&data.vocab, &codec.config, Layout::ImageFirst)?;
    let items = data
        .base
        .iter()
        .map(|s| (s.caption.as_str(), &s.image))
        .chain(
            data.emoji_split(Split::Train)
                .map(|e| (e.caption.as_str(), &e.image)),
        );
    let seqs = sequences(&codec, &data.vocab, &config.spec, items)?;
    let mut lm = Lm::<f32>::init(config, opts.init_seed)?;
    let mask = FreezeMask::none(&lm.params);
    let report = lm::train(&mut lm, &mask, &seqs, &opts.train, log_step("inverse", 50))?;
    let steps = report.steps.len() as u64;
    finish_lm(
        run,
        ModelSlot::LmInverse,
        &lm,
        &data.vocab,
        steps,
        vec![],
        &report,
        serde_json::to_value(opts)?,
    )
}

// ------------------------------------------------------------------ generation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerateOptions {
    pub caption: String,
    pub sampling: SamplingConfig,
    pub model: ModelSlot,
    /// Defaults to `generations/<id>`.
    pub out_dir: Option<PathBuf>,
}

impl GenerateOptions {
    pub fn new(caption: impl Into<String>) -> Self {
        Self {
            caption: caption.into(),
            sampling: SamplingConfig::default(),
            model: ModelSlot::LmEmojich,
            out_dir: None,
        }
    }
}

/// Generation details carried alongside every sticker.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub caption: String,
    pub seed: u64,
    pub index: usize,
    pub sampling: SamplingConfig,
    pub lm: String,
    pub codec: String,
    pub grid_hash: String,
}

/// One line of `generation.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub caption: String,
    pub seed: u64,
    pub index: usize,
    /// Relative to the generation directory.
    pub file: String,
    pub sha256: String,
    pub grid: Vec<usize>,
    pub grid_hash: String,
    pub sampling: SamplingConfig,
    pub lm: String,
    pub codec: String,
}

impl GenerationRecord {
    pub fn provenance(&self) -> Provenance {
        Provenance {
            caption: self.caption.clone(),
            seed: self.seed,
            index: self.index,
            sampling: self.sampling,
            lm: self.lm.clone(),
            codec: self.codec.clone(),
            grid_hash: self.grid_hash.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationOutput {
    pub id: String,
    pub dir: String,
    pub manifest: Artifact,
    pub records: Vec<GenerationRecord>,
}

pub fn generate(run: &RunDir, opts: &GenerateOptions) -> Result<GenerationOutput> {
    const STEP: &str = "generate";
    opts.sampling.validate()?;
    if dataset::normalize_caption(&opts.caption).trim().is_empty() {
        return Err(Error::InvalidArgument("caption is empty".into()));
    }
    if !matches!(opts.model, ModelSlot::LmBase | ModelSlot::LmEmojich) {
        return Err(Error::InvalidArgument(
            "generation needs lm_base or lm_emojich".into(),
        ));
    }
    let codec_ck = run.load_checkpoint(ModelSlot::Codec)?;
    let lm_ck = run.load_checkpoint(opts.model)?;
    let codec = VqCodec::from_checkpoint(&codec_ck)?;
    let lm = Lm::from_checkpoint(&lm_ck)?;
    let vocab_json = lm_ck.metadata["vocab"]
        .as_str()
        .ok_or_else(|| Error::Config("model checkpoint carries no vocabulary".into()))?;
    let vocab = Vocabulary::from_json(vocab_json)?;
    let (lm_id, codec_id) = (checkpoint_id(&lm_ck), checkpoint_id(&codec_ck));
    let id = short_hash(&serde_json::json!({
        "caption": opts.caption, "sampling": opts.sampling, "lm": lm_id, "codec": codec_id,
    }));
    let dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| run.path(format!("generations/{id}")));
    let images = sampler::generate(&lm, &codec, &vocab, &opts.caption, &opts.sampling)?;
    let mut records = Vec::with_capacity(images.len());
    for g in &images {
        let file = format!("img_{:03}.png", g.index);
        let art = run.write_png(STEP, &dir.join(&file), &g.image)?;
        records.push(GenerationRecord {
            caption: opts.caption.clone(),
            seed: opts.sampling.seed,
            index: g.index,
            file,
            sha256: art.sha256,
            grid: g.grid.indices.clone(),
            grid_hash: format!("{:016x}", eval::grid_hash(&g.grid)),
            sampling: opts.sampling,
            lm: lm_id.clone(),
            codec: codec_id.clone(),
        });
    }
    let manifest = run.write_jsonl(STEP, &dir.join("generation.jsonl"), &records)?;
    Ok(GenerationOutput {
        id,
        dir: run.rel(&dir),
        manifest,
        records,
    })
}

pub fn load_generation(dir: &Path) -> Result<Vec<GenerationRecord>> {
    read_jsonl(&dir.join("generation.jsonl"))
}

// ------------------------------------------------------------------ rerank and evaluation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub rank: usize,
    pub index: usize,
    pub loss: f64,
    pub file: String,
}

/// Orders a generation by caption loss under the inverse model, training
/// that model first if the run has none.
pub fn rerank(
    run: &RunDir,
    generation_dir: &Path,
    inverse: &LmStepOptions,
) -> Result<Vec<RankedImage>> {
    let records = load_generation(generation_dir)?;
    let caption = records
        .first()
        .map(|r| r.caption.clone())
        .ok_or_else(|| Error::InvalidArgument("generation is empty".into()))?;
    if !run.checkpoint_path(ModelSlot::LmInverse).is_file() {
        log::info!("no inverse model yet; training one");
        train_inverse(run, inverse)?;
    }
    let scorer = CaptionScorer::from_checkpoint(&run.load_checkpoint(ModelSlot::LmInverse)?)?;
    let codec = load_codec(run)?;
    let grids = records
        .iter()
        .map(|r| {
            vq_codec::CodebookGrid::new(
                codec.config.grid(),
                r.grid.clone(),
                codec.config.codebook_size,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let ranked: Vec<RankedImage> = scorer
        .rerank(&grids, &caption)?
        .into_iter()
        .enumerate()
        .map(|(rank, (i, loss))| RankedImage {
            rank,
            index: records[i].index,
            loss,
            file: records[i].file.clone(),
        })
        .collect();
    run.write_jsonl("rerank", &generation_dir.join("rerank.jsonl"), &ranked)?;
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidReport {
    pub frechet: f64,
    pub reference: usize,
    pub generated: usize,
}

/// Fréchet distance between codec-encoder features of the emoji set and of
/// the images in the given generation directories.
pub fn eval_fid(run: &RunDir, generation_dirs: &[PathBuf]) -> Result<FidReport> {
    let data = load_prepared(run)?;
    let codec = load_codec(run)?;
    let mut generated = Vec::new();
    for d in generation_dirs {
        for r in load_generation(d)? {
            generated.push(imaging::read_png(d.join(&r.file))?);
        }
    }
    let reference: Vec<ImageBuffer> = data.emoji.iter().map(|e| e.image.clone()).collect();
    let a = eval::summarize_features(&reference, &codec)?;
    let b: GaussianSummary = eval::summarize_features(&generated, &codec)?;
    let report = FidReport {
        frechet: eval::frechet_distance(&a, &b)?,
        reference: reference.len(),
        generated: generated.len(),
    };
    run.write_json("eval-fid", &run.path("reports/fid.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------------ segmentation

/// An image to segment, with provenance when it came from a generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StickerSource {
    pub path: PathBuf,
    pub provenance: Option<Provenance>,
}

/// Sources for `indices` of a generation (all images when empty).
pub fn generation_sources(generation_dir: &Path, indices: &[usize]) -> Result<Vec<StickerSource>> {
    let records = load_generation(generation_dir)?;
    let picked: Vec<&GenerationRecord> = if indices.is_empty() {
        records.iter().collect()
    } else {
        indices
            .iter()
            .map(|&i| {
                records
                    .iter()
                    .find(|r| r.index == i)
                    .ok_or_else(|| Error::InvalidArgument(format!("generation has no image {i}")))
            })
            .collect::<Result<_>>()?
    };
    Ok(picked
        .into_iter()
        .map(|r| StickerSource {
            path: generation_dir.join(&r.file),
            provenance: Some(r.provenance()),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOptions {
    pub threshold: f64,
    pub hard: bool,
    /// Defaults to `segments/<id>`.
    pub out_dir: Option<PathBuf>,
}

impl Default for SegmentOptions {
    fn default() -> Self {
        Self {
            threshold: segmentation::DEFAULT_THRESHOLD,
            hard: true,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentRecord {
    pub name: String,
    pub source: String,
    pub regime: Regime,
    pub confidence: f64,
    pub mask: Artifact,
    pub rgba: Artifact,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentOutput {
    pub id: String,
    pub dir: String,
    pub model: Option<String>,
    pub records: Vec<SegmentRecord>,
}

/// Masks and RGBA stickers for each source. Without a trained segmentation
/// checkpoint every image takes the flood-fill regime.
pub fn segment(
    run: &RunDir,
    sources: &[StickerSource],
    opts: &SegmentOptions,
) -> Result<SegmentOutput> {
    const STEP: &str = "segment";
    if sources.is_empty() {
        return Err(Error::InvalidArgument("nothing to segment".into()));
    }
    let model = match run.load_checkpoint(ModelSlot::Seg) {
        Ok(ck) => Some((checkpoint_id(&ck), SegModel::from_checkpoint(&ck)?)),
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    let id = short_hash(&serde_json::json!({
        "sources": sources.iter().map(|s| run.rel(&s.path)).collect::<Vec<_>>(),
        "threshold": opts.threshold, "hard": opts.hard, "model": model.as_ref().map(|m| &m.0),
    }));
    let dir = opts
        .out_dir
        .clone()
        .unwrap_or_else(|| run.path(format!("segments/{id}")));
    let results: Vec<(ImageBuffer, AlphaMask, Regime)> = sources
        .par_iter()
        .map(|s| {
            let img = imaging::read_png(&s.path)?;
            let rgb = if img.is_rgba() {
                imaging::flatten_alpha(&img, imaging::DEFAULT_ALPHA_THRESHOLD)?
            } else {
                img
            };
            let (mask, regime) = match &model {
                Some((_, m)) => segmentation::segment(m, &rgb, opts.threshold)?,
                None => (
                    segmentation::contour_fallback(&rgb, segmentation::DEFAULT_WHITE_TOL),
                    Regime::Fallback,
                ),
            };
            Ok((rgb, mask, regime))
        })
        .collect::<Result<_>>()?;
    let mut records = Vec::with_capacity(sources.len());
    for (i, (s, (rgb, mask, regime))) in sources.iter().zip(results).enumerate() {
        let stem = s
            .path
            .file_stem()
            .and_then(|x| x.to_str())
            .unwrap_or("image");
        let name = format!("{i:03}_{stem}");
        let mask_art = run.write_artifact(
            STEP,
            &dir.join(format!("{name}_mask.png")),
            &imaging::encode_gray_png(mask.width, mask.height, &mask.to_bytes())?,
        )?;
        let rgba = segmentation::compose_rgba(&rgb, &mask, opts.hard)?;
        let rgba_art = run.write_png(STEP, &dir.join(format!("{name}_rgba.png")), &rgba)?;
        records.push(SegmentRecord {
            name,
            source: run.rel(&s.path),
            regime,
            confidence: mask.confidence,
            mask: mask_art,
            rgba: rgba_art,
            provenance: s.provenance.clone(),
        });
    }
    run.write_jsonl(STEP, &dir.join("segment.jsonl"), &records)?;
    Ok(SegmentOutput {
        id,
        dir: run.rel(&dir),
        model: model.map(|m| m.0),
        records,
    })
}

pub fn load_segments(dir: &Path) -> Result<Vec<SegmentRecord>> {
    read_jsonl(&dir.join("segment.jsonl"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSegOptions {
    pub config: SegConfig,
    pub pseudo: PseudoLabelConfig,
    /// Fraction of the emoji training split whose masks are given up front;
    /// the rest forms the unlabeled pool.
    pub labeled_frac: f64,
    /// Directory of `<name>.png` + `<name>_mask.png` pairs injected after round 1.
    pub extra_masks: Option<PathBuf>,
    pub init_seed: u64,
}

impl Default for TrainSegOptions {
    fn default() -> Self {
        Self {
            config: SegConfig::default(),
            pseudo: PseudoLabelConfig::default(),
            labeled_frac: 0.5,
            extra_masks: None,
            init_seed: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSegReport {
    pub rounds: Vec<segmentation::RoundRecord>,
    pub labeled: usize,
    pub pool: usize,
    pub injected: usize,
    /// Pixel accuracy of the model mask on the held-out split.
    pub val_accuracy: Option<f64>,
    /// Fraction of held-out images whose confidence reaches the threshold.
    pub val_model_regime: Option<f64>,
    pub checkpoint: Artifact,
}

fn load_mask_pairs(dir: &Path) -> Result<Vec<LabeledImage>> {
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for p in entries {
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !name.ends_with(".png") || name.ends_with("_mask.png") {
            continue;
        }
        let mask_path = p.with_file_name(name.replace(".png", "_mask.png"));
        if !mask_path.is_file() {
            continue;
        }
        let img = imaging::read_png(&p)?;
        let image = if img.is_rgba() {
            imaging::flatten_alpha(&img, imaging::DEFAULT_ALPHA_THRESHOLD)?
        } else {
            img
        };
        let mask = AlphaMask::load_png(&mask_path)?;
        if (mask.width, mask.height) != (image.width(), image.height()) {
            return Err(Error::InvalidArgument(format!(
                "{} does not match its image size",
                mask_path.display()
            )));
        }
        out.push(LabeledImage { image, mask });
    }
    Ok(out)
}

/// Pseudo-labelling on the emoji set; held-out accuracy is measured on the
/// validation split.
pub fn train_seg(run: &RunDir, opts: &TrainSegOptions) -> Result<TrainSegReport> {
    const STEP: &str = "train-seg";
    if !(0.0..=1.0).contains(&opts.labeled_frac) {
        return Err(Error::InvalidArgument(
            "labeled_frac must lie in [0, 1]".into(),
        ));
    }
    let data = load_prepared(run)?;
    let train: Vec<&PreparedEmoji> = data.emoji_split(Split::Train).collect();
    let n_labeled =
        ((train.len() as f64 * opts.labeled_frac).ceil() as usize).clamp(1, train.len().max(1));
    let labeled: Vec<LabeledImage> = train
        .iter()
        .take(n_labeled)
        .map(|e| LabeledImage {
            image: e.image.clone(),
            mask: e.mask.clone(),
        })
        .collect();
    let pool: Vec<ImageBuffer> = train
        .iter()
        .skip(n_labeled)
        .map(|e| e.image.clone())
        .collect();
    let mut extra = match &opts.extra_masks {
        Some(d) => load_mask_pairs(d)?,
        None => vec![],
    };
    let injected = extra.len();
    let mut model = SegModel::init(opts.config, opts.init_seed)?;
    let state = segmentation::pseudo_label_loop(&mut model, labeled, &pool, &opts.pseudo, |rec| {
        log::info!(
            "pseudo-label round {}: +{} (total {}), mean confidence {:.4}",
            rec.round,
            rec.added,
            rec.total,
            rec.mean_confidence
        );
        std::mem::take(&mut extra)
    })?;
    run.write_jsonl(STEP, &run.path("reports/pseudo_label.jsonl"), &state.rounds)?;

    let val: Vec<&PreparedEmoji> = data.emoji_split(Split::Val).collect();
    let (val_accuracy, val_model_regime) = if val.is_empty() {
        (None, None)
    } else {
        let scored: Vec<(f64, bool)> = val
            .par_iter()
            .map(|e| {
                let m = model.predict_mask(&e.image)?;
                Ok((
                    m.pixel_accuracy(&e.mask)?,
                    m.confidence >= opts.pseudo.threshold,
                ))
            })
            .collect::<Result<_>>()?;
        let n = scored.len() as f64;
        (
            Some(scored.iter().map(|s| s.0).sum::<f64>() / n),
            Some(scored.iter().filter(|s| s.1).count() as f64 / n),
        )
    };
    let ck = model.to_checkpoint(serde_json::json!({ "options": opts, "rounds": state.rounds }));
    let checkpoint = run.save_checkpoint(ModelSlot::Seg, &ck)?;
    let report = TrainSegReport {
        rounds: state.rounds,
        labeled: n_labeled,
        pool: pool.len(),
        injected,
        val_accuracy,
        val_model_regime,
        checkpoint,
    };
    run.write_json(STEP, &run.path("reports/seg.json"), &report)?;
    Ok(report)
}

// ------------------------------------------------------------------ export

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportOptions {
    pub name: String,
    pub side: usize,
}

impl ExportOptions {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            side: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackSticker {
    pub file: String,
    pub sha256: String,
    pub source: String,
    pub regime: Regime,
    pub confidence: f64,
    pub provenance: Option<Provenance>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StickerPack {
    pub name: String,
    pub side: usize,
    pub stickers: Vec<PackSticker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PackOutput {
    pub dir: String,
    pub archive: Artifact,
    pub pack: StickerPack,
}

/// Pack names become directory names: letters, digits, `-`, `_` and `.`
/// only, and not starting with a dot.
pub fn validate_pack_name(name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name.len() <= 64
        && !name.starts_with('.')
        && name
            .chars()
            .all(|c| c.is_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "invalid pack name `{name}`"
        )))
    }
}

/// Upscales segmented stickers to `side` and writes them, a provenance file
/// and a tar archive of both.
pub fn export_pack(
    run: &RunDir,
    items: &[SegmentRecord],
    opts: &ExportOptions,
) -> Result<PackOutput> {
    const STEP: &str = "export-pack";
    validate_pack_name(&opts.name)?;
    if items.is_empty() {
        return Err(Error::InvalidArgument(
            "pack needs at least one sticker".into(),
        ));
    }
    if opts.side == 0 {
        return Err(Error::InvalidArgument(
            "export side must be positive".into(),
        ));
    }
    let dir = run.path(format!("packs/{}", opts.name));
    let scaled: Vec<ImageBuffer> = items
        .par_iter()
        .map(|r| {
            let img = imaging::read_png(run.path(&r.rgba.path))?;
            if !img.is_rgba() {
                return Err(Error::InvalidFormat(format!("{} is not RGBA", r.rgba.path)));
            }
            imaging::resize_bicubic(&img, opts.side, opts.side)
        })
        .collect::<Result<_>>()?;
    let mut stickers = Vec::with_capacity(items.len());
    let mut files = Vec::with_capacity(items.len() + 1);
    for (i, (r, img)) in items.iter().zip(&scaled).enumerate() {
        let bytes = imaging::encode_png(img)?;
        let file = format!("sticker_{i:02}.png");
        let art = run.write_artifact(STEP, &dir.join(&file), &bytes)?;
        stickers.push(PackSticker {
            file: file.clone(),
            sha256: art.sha256,
            source: r.source.clone(),
            regime: r.regime,
            confidence: r.confidence,
            provenance: r.provenance.clone(),
        });
        files.push((file, bytes));
    }
    let pack = StickerPack {
        name: opts.name.clone(),
        side: opts.side,
        stickers,
    };
    let provenance = serde_json::to_vec_pretty(&pack)?;
    run.write_artifact(STEP, &dir.join("provenance.json"), &provenance)?;
    files.push(("provenance.json".into(), provenance));

    let mut builder = tar::Builder::new(Vec::new());
    for (file, bytes) in &files {
        let mut header = tar::Header::new_gnu();
        header.set_size(bytes.len() as u64);
        header.set_mode(0o644);
        header.set_mtime(0);
        header.set_cksum();
        builder
            .append_data(
                &mut header,
                format!("{}/{file}", opts.name),
                bytes.as_slice(),
            )
            .map_err(|e| Error::io(&dir, e))?;
    }
    let archive_bytes = builder.into_inner().map_err(|e| Error::io(&dir, e))?;
    let archive = run.write_artifact(
        STEP,
        &run.path(format!("packs/{}.tar", opts.name)),
        &archive_bytes,
    )?;
    Ok(PackOutput {
        dir: run.rel(&dir),
        archive,
        pack,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pack_names() {
        for ok in ["pack", "my-pack_1", "котики", "v1.2"] {
            assert!(validate_pack_name(ok).is_ok(), "{ok}");
        }
        for bad in ["", "a/b", "..", "../x", "a\\b", ".hidden", "a b"] {
            assert!(validate_pack_name(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn missing_inputs_name_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        match load_prepared(&run) {
            Err(Error::MissingArtifact { step, .. }) => assert_eq!(step, "prepare-data"),
            other => panic!("{other:?}"),
        }
        match run.load_checkpoint(ModelSlot::LmEmojich) {
            Err(Error::MissingArtifact { step, .. }) => assert_eq!(step, "finetune"),
            other => panic!("{other:?}"),
        }
        assert!(run.checkpoint_versions().values().all(Option::is_none));
    }

    #[test]
    fn artifacts_are_logged_with_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let a = run
            .write_artifact("t", &run.path("x/y.txt"), b"hello")
            .unwrap();
        assert_eq!(a.path, "x/y.txt");
        assert_eq!(a.sha256, sha256_hex(b"hello"));
        let log = fs::read_to_string(run.path("artifacts.jsonl")).unwrap();
        assert!(log.contains("\"step\":\"t\"") && log.contains(&a.sha256));
        assert!(!run.path("x/y.txt.tmp").exists());
    }

    #[test]
    fn rgb_sources_get_flood_fill_masks() {
        let img = ImageBuffer::from_fn(16, 16, 3, |x, y| {
            if (4..12).contains(&x) && (4..12).contains(&y) {
                [200, 0, 0, 0]
            } else {
                [255, 255, 255, 0]
            }
        })
        .unwrap();
        let m = sticker_mask(&img, 16).unwrap();
        assert_eq!(m.get(0, 0), 0.0);
        assert_eq!(m.get(8, 8), 1.0);
        let rgba = img.to_rgba();
        assert!(sticker_mask(&rgba, 8)
            .unwrap()
            .values
            .iter()
            .all(|&v| v == 1.0));
    }
}
