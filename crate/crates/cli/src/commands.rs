//! Argument parsing and dispatch for the `emojich` binary.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use emojich::lm::{LmTrainConfig, LossWeights};
use emojich::pipeline::{self, ModelSlot, RunDir};
use emojich::sampler::SamplingConfig;
use emojich::segmentation::{PseudoLabelConfig, SegConfig, SegTrainConfig};
use emojich::vq_codec::{CodecConfig, CodecTrainConfig};
use serde::Serialize;

use crate::service::{self, ServeConfig};

#[derive(Debug, Parser)]
#[command(
    name = "emojich",
    version,
    about = "Train, sample and package emoji sticker models on CPU"
)]
pub struct Cli {
    /// Run directory holding data, checkpoints and outputs.
    #[arg(long, global = true, env = pipeline::RUN_DIR_ENV, default_value = "run")]
    pub run_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Preprocess an emoji manifest and render the synthetic base set.
    PrepareData(PrepareArgs),
    /// Train the VQ image codec on base and emoji images.
    TrainCodec(CodecArgs),
    /// Train the text-to-image model on the synthetic base set.
    PretrainLm(PretrainArgs),
    /// Fine-tune the base model on emoji with attention and feed-forward frozen.
    Finetune(FinetuneArgs),
    /// Sample a batch of images for a caption.
    Generate(GenerateArgs),
    /// Cut stickers out of generated or given images.
    Segment(SegmentArgs),
    /// Order a generation by caption loss under the image-first model.
    Rerank(RerankArgs),
    /// Fréchet distance between emoji and generated image features.
    EvalFid(EvalFidArgs),
    /// Train the segmentation model with pseudo-labelling.
    TrainSeg(TrainSegArgs),
    /// Upscale segmented stickers into a named pack with provenance.
    ExportPack(ExportArgs),
    /// Run the HTTP job service.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Line-delimited JSON manifest with image_path and caption fields.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Stored image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    /// Number of synthetic base-set glyphs.
    #[arg(long, default_value_t = 192)]
    pub base_count: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Reassign train/val splits with this validation fraction.
    #[arg(long)]
    pub val_frac: Option<f64>,
}

#[derive(Debug, Args)]
pub struct CodecArgs {
    #[arg(long, default_value_t = 32)]
    pub input_side: usize,
    #[arg(long, default_value_t = 256)]
    pub codebook_size: usize,
    #[arg(long, default_value_t = 64)]
    pub code_dim: usize,
    /// Channels of the first encoder block.
    #[arg(long, default_value_t = CodecConfig::default().enc_channels)]
    pub enc_channels: usize,
    /// Channels of the two decoder upsampling blocks.
    #[arg(long, default_value = "32,16", value_parser = channel_pair)]
    pub dec_channels: [usize; 2],
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    pub start_lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 2e-5)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 0.1)]
    pub warmup_frac: f64,
    /// Global gradient-norm clip.
    #[arg(long, default_value_t = 1.0)]
    pub clip: f64,
    /// Gumbel-Softmax temperature at the first step.
    #[arg(long, default_value_t = 1.0)]
    pub tau_start: f64,
    /// Gumbel-Softmax temperature at the last step.
    #[arg(long, default_value_t = 1.0 / 16.0)]
    pub tau_end: f64,
    /// Epochs at whose start unused codes are re-seeded from encoder outputs.
    #[arg(long, default_value_t = 4)]
    pub restart_epochs: usize,
    /// Train through the soft relaxation instead of straight-through one-hots.
    #[arg(long)]
    pub soft: bool,
}

fn channel_pair(s: &str) -> Result<[usize; 2], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [a, b] if a > 0 && b > 0 => Ok([a, b]),
        _ => Err("expected two positive counts, e.g. 32,16".into()),
    }
}

impl CodecArgs {
    fn options(&self) -> pipeline::CodecStepOptions {
        pipeline::CodecStepOptions {
            config: CodecConfig {
                input_side: self.input_side,
                codebook_size: self.codebook_size,
                code_dim: self.code_dim,
                enc_channels: self.enc_channels,
                dec_channels: self.dec_channels,
                ..CodecConfig::default()
            },
            train: CodecTrainConfig {
                epochs: self.epochs,
                batch: self.batch,
                seed: self.seed,
                start_lr: self.start_lr,
                max_lr: self.max_lr,
                final_lr: self.final_lr,
                warmup_frac: self.warmup_frac,
                clip: self.clip,
                tau_start: self.tau_start,
                tau_end: self.tau_end,
                straight_through: !self.soft,
                restart_epochs: self.restart_epochs,
            },
        }
    }
}

/// Transformer shape flags.
#[derive(Debug, Args)]
pub struct ArchArgs {
    #[arg(long, default_value_t = 128)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub layers: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 512)]
    pub d_ff: usize,
    /// Text positions (BOS plus caption characters).
    #[arg(long, default_value_t = 32)]
    pub t_text: usize,
    /// Seed for weight initialization.
    #[arg(long, default_value_t = 1)]
    pub init_seed: u64,
}

impl ArchArgs {
    fn arch(&self) -> pipeline::LmArch {
        pipeline::LmArch {
            d_model: self.d_model,
            n_layers: self.layers,
            n_heads: self.heads,
            d_ff: self.d_ff,
            t_text: self.t_text,
        }
    }
}

/// Optimizer flags; unset values keep the command's recipe.
#[derive(Debug, Args)]
pub struct LmTrainArgs {
    /// [pretrain: 20, finetune: 40]
    #[arg(long)]
    pub epochs: Option<usize>,
    /// [pretrain: 8, finetune: 2]
    #[arg(long)]
    pub batch: Option<usize>,
    /// [pretrain: 1e-4, finetune: 4e-7]
    #[arg(long)]
    pub start_lr: Option<f64>,
    /// [pretrain: 2e-3, finetune: 1e-5]
    #[arg(long)]
    pub max_lr: Option<f64>,
    /// [pretrain: 1e-5, finetune: 2e-8]
    #[arg(long)]
    pub final_lr: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    pub warmup_frac: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    pub clip: Option<f64>,
    /// Loss weight of text positions [default: 1]
    #[arg(long)]
    pub w_text: Option<f64>,
    /// Loss weight of image positions [default: 1000]
    #[arg(long)]
    pub w_image: Option<f64>,
    /// Shuffling seed [pretrain: 7, finetune: 42]
    #[arg(long)]
    pub seed: Option<u64>,
}

impl LmTrainArgs {
    fn apply(&self, base: LmTrainConfig) -> LmTrainConfig {
        LmTrainConfig {
            epochs: self.epochs.unwrap_or(base.epochs),
            batch: self.batch.unwrap_or(base.batch),
            start_lr: self.start_lr.unwrap_or(base.start_lr),
            max_lr: self.max_lr.unwrap_or(base.max_lr),
            final_lr: self.final_lr.unwrap_or(base.final_lr),
            warmup_frac: self.warmup_frac.unwrap_or(base.warmup_frac),
            clip: self.clip.unwrap_or(base.clip),
            weights: LossWeights {
                w_text: self.w_text.unwrap_or(base.weights.w_text),
                w_image: self.w_image.unwrap_or(base.weights.w_image),
            },
            seed: self.seed.unwrap_or(base.seed),
        }
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub train: LmTrainArgs,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: LmTrainArgs,
    /// Update every tensor instead of freezing attention and feed-forward.
    #[arg(long)]
    pub no_freeze: bool,
}

/// Sampling flags shared by `generate` and the service.
#[derive(Debug, Args)]
pub struct SamplingArgs {
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    /// Images per caption.
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    /// Clamped to the image vocabulary size.
    #[arg(long, default_value_t = 2048)]
    pub top_k: usize,
    #[arg(long, default_value_t = 0.995)]
    pub top_p: f64,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
}

impl SamplingArgs {
    fn config(&self) -> SamplingConfig {
        SamplingConfig {
            seed: self.seed,
            batch: self.batch,
            top_k: self.top_k,
            top_p: self.top_p,
            temperature: self.temperature,
        }
    }
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum GenModel {
    LmEmojich,
    LmBase,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub caption: String,
    #[command(flatten)]
    pub sampling: SamplingArgs,
    #[arg(long, value_enum, default_value = "lm-emojich")]
    pub model: GenModel,
    /// Output directory [default: <run>/generations/<id>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["generation", "input"])))]
pub struct SegmentArgs {
    /// Generation directory whose images to segment.
    #[arg(long)]
    pub generation: Option<PathBuf>,
    /// Indices within the generation [default: all]
    #[arg(long, value_delimiter = ',')]
    pub indices: Vec<usize>,
    /// PNG files to segment.
    #[arg(long, num_args = 1..)]
    pub input: Vec<PathBuf>,
    /// Per-image confidence needed to keep the model mask.
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
    /// Alpha = round(mask * 255) instead of a hard 0/255 cut.
    #[arg(long)]
    pub soft: bool,
    /// Output directory [default: <run>/segments/<id>]
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerankArgs {
    #[arg(long)]
    pub generation: PathBuf,
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Applies when the inverse model has to be trained first.
    #[command(flatten)]
    pub train: LmTrainArgs,
}

#[derive(Debug, Args)]
pub struct EvalFidArgs {
    /// Generation directories to compare against the emoji set.
    #[arg(long, required = true, num_args = 1..)]
    pub generation: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainSegArgs {
    /// Fraction of the emoji training split given with masks.
    #[arg(long, default_value_t = 0.5)]
    pub labeled_frac: f64,
    #[arg(long, default_value_t = 0.99)]
    pub threshold: f64,
    #[arg(long, default_value_t = 10)]
    pub max_rounds: usize,
    /// Stop once a round adds fewer than this fraction of the training set.
    #[arg(long, default_value_t = 0.01)]
    pub plateau_frac: f64,
    /// Epochs per round.
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 3e-4)]
    pub start_lr: f64,
    #[arg(long, default_value_t = 3e-3)]
    pub max_lr: f64,
    #[arg(long, default_value_t = 3e-5)]
    pub final_lr: f64,
    #[arg(long, default_value_t = 17)]
    pub seed: u64,
    /// Model input side (multiple of 4).
    #[arg(long, default_value_t = 32)]
    pub input_side: usize,
    /// Directory of <name>.png + <name>_mask.png pairs added after round 1.
    #[arg(long)]
    pub extra_masks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub name: String,
    /// Segment output directories to include.
    #[arg(long, required = true, num_args = 1..)]
    pub segments: Vec<PathBuf>,
    /// Positions within the listed segment records [default: all]
    #[arg(long, value_delimiter = ',')]
    pub indices: Vec<usize>,
    /// Output side length.
    #[arg(long, default_value_t = 512)]
    pub side: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: String,
    /// Concurrent jobs [default: number of CPU cores]
    #[arg(long)]
    pub workers: Option<usize>,
}

fn print<T: Serialize>(value: &T) -> emojich::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

/// Runs one parsed command. `serve` blocks until shutdown.
pub fn run(cli: Cli) -> emojich::Result<()> {
    let run = RunDir::new(&cli.run_dir);
    match cli.command {
        Command::PrepareData(a) => {
            let opts = pipeline::PrepareOptions {
                manifest: a.manifest,
                side: a.side,
                base_count: a.base_count,
                seed: a.seed,
                val_frac: a.val_frac,
            };
            print(&pipeline::prepare_data(&run, &opts)?)
        }
        Command::TrainCodec(a) => print(&pipeline::train_codec(&run, &a.options())?),
        Command::PretrainLm(a) => {
            let opts = pipeline::LmStepOptions {
                arch: a.arch.arch(),
                train: a.train.apply(LmTrainConfig::pretrain()),
                init_seed: a.arch.init_seed,
            };
            print(&pipeline::pretrain_lm(&run, &opts)?)
        }
        Command::Finetune(a) => {
            let opts = pipeline::FinetuneOptions {
                train: a.train.apply(LmTrainConfig::emojich()),
                freeze: !a.no_freeze,
            };
            print(&pipeline::finetune(&run, &opts)?)
        }
        Command::Generate(a) => {
            let opts = pipeline::GenerateOptions {
                caption: a.caption,
                sampling: a.sampling.config(),
                model: match a.model {
                    GenModel::LmEmojich => ModelSlot::LmEmojich,
                    GenModel::LmBase => ModelSlot::LmBase,
                },
                out_dir: a.out,
            };
            print(&pipeline::generate(&run, &opts)?)
        }
        Command::Segment(a) => {
            let sources = match &a.generation {
                Some(dir) => pipeline::generation_sources(dir, &a.indices)?,
                None => a
                    .input
                    .iter()
                    .map(|p| pipeline::StickerSource {
                        path: p.clone(),
                        provenance: None,
                    })
                    .collect(),
            };
            let opts = pipeline::SegmentOptions {
                threshold: a.threshold,
                hard: !a.soft,
                out_dir: a.out,
            };
            print(&pipeline::segment(&run, &sources, &opts)?)
        }
        Command::Rerank(a) => {
            let opts = pipeline::LmStepOptions {
                arch: a.arch.arch(),
                train: a.train.apply(LmTrainConfig::pretrain()),
                init_seed: a.arch.init_seed,
            };
            print(&pipeline::rerank(&run, &a.generation, &opts)?)
        }
        Command::EvalFid(a) => print(&pipeline::eval_fid(&run, &a.generation)?),
        Command::TrainSeg(a) => {
            let opts = pipeline::TrainSegOptions {
                config: SegConfig {
                    input_side: a.input_side,
                    ..SegConfig::default()
                },
                pseudo: PseudoLabelConfig {
                    threshold: a.threshold,
                    max_rounds: a.max_rounds,
                    plateau_frac: a.plateau_frac,
                    train: SegTrainConfig {
                        epochs: a.epochs,
                        batch: a.batch,
                        start_lr: a.start_lr,
                        max_lr: a.max_lr,
                        final_lr: a.final_lr,
                        seed: a.seed,
                        ..SegTrainConfig::default()
                    },
                },
                labeled_frac: a.labeled_frac,
                extra_masks: a.extra_masks,
                ..Default::default()
            };
            print(&pipeline::train_seg(&run, &opts)?)
        }
        Command::ExportPack(a) => {
            let mut records = Vec::new();
            for d in &a.segments {
                records.extend(pipeline::load_segments(d)?);
            }
            let picked = if a.indices.is_empty() {
                records
            } else {
                a.indices
                    .iter()
                    .map(|&i| {
                        records.get(i).cloned().ok_or_else(|| {
                            emojich::Error::InvalidArgument(format!(
                                "no segment record at position {i}"
                            ))
                        })
                    })
                    .collect::<emojich::Result<_>>()?
            };
            let opts = pipeline::ExportOptions {
                name: a.name,
                side: a.side,
            };
            print(&pipeline::export_pack(&run, &picked, &opts)?)
        }
        Command::Serve(a) => {
            let workers = a.workers.unwrap_or_else(|| {
                std::thread::available_parallelism()
                    .map(|n| n.get())
                    .unwrap_or(1)
            });
            let rt =
                tokio::runtime::Runtime::new().map_err(|e| emojich::Error::io(&cli.run_dir, e))?;
            rt.block_on(service::serve(ServeConfig {
                run_dir: cli.run_dir,
                addr: a.addr,
                workers,
            }))
        }
    }
}
