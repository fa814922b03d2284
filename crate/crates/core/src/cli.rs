//! The `clear-lab` command line.
//!
//! Each subcommand resolves its settings from flags, then an optional TOML
//! file (`--config`, flat keys named like the long flags), then built-in
//! defaults. The resolved settings are written into every report header.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::dit::{
    eval_samples, generate_teacher_dataset, loss_table, mean_distill_losses, pretrain_teacher,
    train_distill, DataPair, DistillConfig, DitConfig, PretrainConfig, SyntheticTask, ToyDit,
};
use crate::error::LabError;
use crate::exact_rank::exact_rank_bool;
use crate::flops::{flops_of_popcount, flux_cost_table, FluxConfig};
use crate::geometry::TokenGrid;
use crate::mask::{swin_window_count, AttentionMask, MaskPattern, EXACT_RANK_MAX_SIDE};
use crate::parallel::{
    comm_report, distributed_clear_attention, divergence_table, make_plan, reference_inference,
    simulate_inference, CommMode, MsgKind, TextMode,
};
use crate::report::{format_float, Cell, Format, Table};
use crate::tensor::{rank_of, Matrix, DEFAULT_RANK_TOL};
use crate::zoo::{masked_attention, AttentionInputs, AttentionMethod};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "runtime error: {m}"),
        }
    }
}

impl From<LabError> for CliError {
    fn from(e: LabError) -> Self {
        match e {
            LabError::Config(_) | LabError::Geometry(_) | LabError::Shape(_) => CliError::Config(e.to_string()),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser, Debug)]
#[command(name = "clear-lab", version, about = "Local attention masks, cost models, and a toy distillation lab")]
pub struct Cli {
    /// TOML file supplying defaults for the chosen command; flags win.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Build an attention mask; print statistics or save it.
    Mask(MaskArgs),
    /// Attention FLOPS table for a preset transformer.
    Flops(FlopsArgs),
    /// Exact and numerical rank of a mask's image-image block.
    Rank(RankArgs),
    /// Run one attention variant on random inputs and hash its output.
    AttnBench(BenchArgs),
    /// Pretrain a toy teacher and distill a CLEAR student.
    Distill(DistillArgs),
    /// Patch-parallel CLEAR attention or inference over simulated workers.
    Parallel(ParallelArgs),
    /// Sample a dataset from a toy teacher (or the ground-truth task).
    DataGen(DataGenArgs),
}

fn is_false(b: &bool) -> bool {
    !*b
}

/// Image grid and mask selection flags shared by several commands.
#[derive(Args, Serialize, Debug, Default)]
#[serde(rename_all = "kebab-case")]
pub struct GridFlags {
    /// Image grid height in tokens.
    #[arg(long = "H")]
    #[serde(rename = "H", skip_serializing_if = "Option::is_none")]
    pub height: Option<usize>,
    /// Image grid width in tokens.
    #[arg(long = "W")]
    #[serde(rename = "W", skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    /// Number of text tokens.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_text: Option<usize>,
}

#[derive(Args, Serialize, Debug, Default)]
#[serde(rename_all = "kebab-case")]
pub struct MaskFlags {
    /// full | clear | neighborhood | swin | strided
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub method: Option<String>,
    /// CLEAR radius.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// Neighborhood half width.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub half_width: Option<usize>,
    /// Swin window side.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    /// Swin shift applied on odd layers.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shift: Option<usize>,
    /// Layer index (Swin shift parity, strided offset).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layer: Option<usize>,
    /// Strided step.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
}

#[derive(Args, Serialize, Debug, Default)]
#[serde(rename_all = "kebab-case")]
pub struct OutFlags {
    /// Output file.
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// csv | json (default: from the output extension).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<String>,
    /// Seed for every random draw.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Args, Serialize, Debug)]
pub struct MaskArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    /// Print popcount, sparsity, corner row count and image-block rank.
    #[arg(long)]
    #[serde(skip_serializing_if = "is_false")]
    pub stats: bool,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

#[derive(Args, Serialize, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct FlopsArgs {
    /// Model preset (only `flux`).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    /// Square image resolutions in pixels.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resolutions: Option<Vec<usize>>,
    /// CLEAR radii in tokens.
    #[arg(long, value_delimiter = ',')]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

#[derive(Args, Serialize, Debug)]
pub struct RankArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

#[derive(Args, Serialize, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct BenchArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub mask: MaskFlags,
    /// Feature width of the random q, k, v.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// Sigmoid-attention bias (default −ln n).
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bias: Option<f64>,
    /// Agent-attention downsampling factor.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub down_factor: Option<usize>,
    /// Slot-attention slot count.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slots: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

/// Toy transformer and teacher flags shared by `distill` and `data-gen`.
#[derive(Args, Serialize, Debug, Default)]
#[serde(rename_all = "kebab-case")]
pub struct ModelFlags {
    /// Model width.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    /// Transformer blocks.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub blocks: Option<usize>,
    /// Latent channels per image token.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_dim: Option<usize>,
    /// Synthetic task classes.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub classes: Option<usize>,
    /// Teacher pretraining steps (ignored with --teacher-checkpoint).
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_steps: Option<usize>,
    /// Load the teacher instead of pretraining it.
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub teacher_checkpoint: Option<PathBuf>,
    /// Euler steps when sampling from the teacher.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sampler_steps: Option<usize>,
}

#[derive(Args, Serialize, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct DistillArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Student CLEAR radius.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Weight of the prediction loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Weight of the attention-output loss.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    /// Samples in the distillation set.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset_size: Option<usize>,
    /// teacher (sampled from the teacher) | external (ground-truth task)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    /// Save the trained student here.
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

#[derive(Args, Serialize, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct ParallelArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    /// Worker count.
    #[arg(long = "N")]
    #[serde(rename = "N", skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    /// CLEAR radius.
    #[arg(long, allow_hyphen_values = true)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r: Option<f64>,
    /// attention (one layer on random inputs) | inference (toy student sampler)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    /// Feature width of the random q, k, v in attention mode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub channels: Option<usize>,
    /// exact | average (text-query recombination in inference mode)
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub text_mode: Option<String>,
    /// Sampler steps in inference mode.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steps: Option<usize>,
    /// Student checkpoint for inference mode (default: random model).
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Communication ledger CSV.
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

#[derive(Args, Serialize, Debug)]
#[serde(rename_all = "kebab-case")]
pub struct DataGenArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub grid: GridFlags,
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelFlags,
    /// Number of samples.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
    /// teacher | external
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Save the teacher used for sampling.
    #[arg(long, value_name = "PATH")]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    pub out: OutFlags,
}

// Resolved settings. Field names match the flags (kebab-case keys in TOML).

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct MaskConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    pub method: String,
    pub r: f64,
    pub half_width: usize,
    pub window: usize,
    pub shift: usize,
    pub layer: usize,
    pub stride: usize,
    pub stats: bool,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            height: 8,
            width: 8,
            n_text: 4,
            method: "clear".into(),
            r: 3.0,
            half_width: 2,
            window: 4,
            shift: 2,
            layer: 0,
            stride: 2,
            stats: false,
            out: None,
            format: None,
            seed: 0,
        }
    }
}

impl MaskConfig {
    fn grid(&self) -> TokenGrid {
        TokenGrid::new(self.n_text, self.height, self.width)
    }

    fn pattern(&self) -> CliResult<MaskPattern> {
        if self.height == 0 || self.width == 0 {
            return Err(CliError::Config("H and W must be positive".into()));
        }
        let p = match self.method.as_str() {
            "full" => MaskPattern::Full,
            "clear" => MaskPattern::Clear { radius: self.r },
            "neighborhood" => MaskPattern::Neighborhood {
                half_width: self.half_width,
            },
            "swin" => MaskPattern::Swin {
                window: self.window,
                shift: self.shift,
                layer: self.layer,
            },
            "strided" => MaskPattern::Strided {
                stride: self.stride,
                layer: self.layer,
            },
            other => {
                return Err(CliError::Config(format!(
                    "unknown mask method '{other}' (full, clear, neighborhood, swin, strided)"
                )))
            }
        };
        p.validate(&self.grid())?;
        Ok(p)
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct FlopsConfig {
    pub preset: String,
    pub resolutions: Vec<usize>,
    pub radii: Vec<f64>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for FlopsConfig {
    fn default() -> Self {
        FlopsConfig {
            preset: "flux".into(),
            resolutions: vec![1024, 2048, 4096, 8192],
            radii: vec![8.0, 16.0, 32.0],
            out: None,
            format: None,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct BenchConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    pub method: String,
    pub r: f64,
    pub half_width: usize,
    pub window: usize,
    pub shift: usize,
    pub layer: usize,
    pub stride: usize,
    pub channels: usize,
    pub bias: Option<f64>,
    pub down_factor: usize,
    pub slots: usize,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        let m = MaskConfig::default();
        BenchConfig {
            height: m.height,
            width: m.width,
            n_text: m.n_text,
            method: m.method,
            r: m.r,
            half_width: m.half_width,
            window: m.window,
            shift: m.shift,
            layer: m.layer,
            stride: m.stride,
            channels: 16,
            bias: None,
            down_factor: 2,
            slots: 16,
            out: None,
            format: None,
            seed: 0,
        }
    }
}

impl BenchConfig {
    fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            height: self.height,
            width: self.width,
            n_text: self.n_text,
            method: self.method.clone(),
            r: self.r,
            half_width: self.half_width,
            window: self.window,
            shift: self.shift,
            layer: self.layer,
            stride: self.stride,
            ..MaskConfig::default()
        }
    }

    fn attention_method(&self) -> CliResult<AttentionMethod> {
        Ok(match self.method.as_str() {
            "linear" => AttentionMethod::Linear,
            "sigmoid" => AttentionMethod::Sigmoid { bias: self.bias },
            "kv-compressed" => AttentionMethod::KvCompressed,
            "agent" => AttentionMethod::Agent {
                down_factor: self.down_factor,
            },
            "slot" => AttentionMethod::Slot {
                slots: self.slots,
                seed: self.seed.wrapping_add(1),
            },
            _ => AttentionMethod::Masked {
                pattern: self.mask_config().pattern().map_err(|e| match e {
                    CliError::Config(m) => CliError::Config(format!(
                        "{m}; attention methods also include linear, sigmoid, kv-compressed, agent, slot"
                    )),
                    other => other,
                })?,
            },
        })
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ModelConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub in_dim: usize,
    pub classes: usize,
    pub teacher_steps: usize,
    pub teacher_checkpoint: Option<PathBuf>,
    pub sampler_steps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let d = DitConfig::default();
        ModelConfig {
            height: d.height,
            width: d.width,
            n_text: d.n_text,
            dim: d.dim,
            heads: d.heads,
            blocks: d.blocks,
            in_dim: d.in_dim,
            classes: 4,
            teacher_steps: PretrainConfig::default().steps,
            teacher_checkpoint: None,
            sampler_steps: 20,
        }
    }
}

impl ModelConfig {
    fn dit(&self) -> DitConfig {
        DitConfig {
            n_text: self.n_text,
            height: self.height,
            width: self.width,
            in_dim: self.in_dim,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            ..DitConfig::default()
        }
    }

    /// Loads or pretrains the teacher; returns it with its task.
    fn teacher(&self, seed: u64) -> CliResult<(ToyDit, SyntheticTask)> {
        let cfg = self.dit();
        cfg.validate()?;
        let task = SyntheticTask::new(&cfg, self.classes, seed)?;
        let teacher = match &self.teacher_checkpoint {
            Some(path) => {
                let f = std::fs::File::open(path)
                    .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
                let t = ToyDit::load(std::io::BufReader::new(f))?;
                if t.config() != &cfg {
                    return Err(CliError::Config("teacher checkpoint does not match the model flags".into()));
                }
                t
            }
            None => {
                let mut t = ToyDit::new(cfg, seed)?;
                let pc = PretrainConfig {
                    steps: self.teacher_steps,
                    seed: seed.wrapping_add(1),
                    ..PretrainConfig::default()
                };
                pretrain_teacher(&mut t, &task, &pc)?;
                t
            }
        };
        Ok((teacher, task))
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DistillRunConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub in_dim: usize,
    pub classes: usize,
    pub teacher_steps: usize,
    pub teacher_checkpoint: Option<PathBuf>,
    pub sampler_steps: usize,
    pub r: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha: f64,
    pub beta: f64,
    pub dataset_size: usize,
    pub data: String,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for DistillRunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let d = DistillConfig::default();
        DistillRunConfig {
            height: m.height,
            width: m.width,
            n_text: m.n_text,
            dim: m.dim,
            heads: m.heads,
            blocks: m.blocks,
            in_dim: m.in_dim,
            classes: m.classes,
            teacher_steps: m.teacher_steps,
            teacher_checkpoint: None,
            sampler_steps: m.sampler_steps,
            r: 3.0,
            steps: d.steps,
            batch: d.batch,
            lr: d.lr,
            alpha: d.alpha,
            beta: d.beta,
            dataset_size: 64,
            data: "teacher".into(),
            checkpoint: None,
            out: None,
            format: None,
            seed: 0,
        }
    }
}

impl DistillRunConfig {
    fn model(&self) -> ModelConfig {
        ModelConfig {
            height: self.height,
            width: self.width,
            n_text: self.n_text,
            dim: self.dim,
            heads: self.heads,
            blocks: self.blocks,
            in_dim: self.in_dim,
            classes: self.classes,
            teacher_steps: self.teacher_steps,
            teacher_checkpoint: self.teacher_checkpoint.clone(),
            sampler_steps: self.sampler_steps,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct ParallelConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    #[serde(rename = "N")]
    pub workers: usize,
    pub r: f64,
    pub mode: String,
    pub channels: usize,
    pub text_mode: String,
    pub steps: usize,
    pub checkpoint: Option<PathBuf>,
    pub ledger: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for ParallelConfig {
    fn default() -> Self {
        ParallelConfig {
            height: 16,
            width: 8,
            n_text: 4,
            workers: 2,
            r: 3.0,
            mode: "attention".into(),
            channels: 16,
            text_mode: "exact".into(),
            steps: 4,
            checkpoint: None,
            ledger: None,
            out: None,
            format: None,
            seed: 0,
        }
    }
}

#[derive(Serialize, Deserialize, Debug, Clone)]
#[serde(rename_all = "kebab-case", deny_unknown_fields, default)]
pub struct DataGenConfig {
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub n_text: usize,
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub in_dim: usize,
    pub classes: usize,
    pub teacher_steps: usize,
    pub teacher_checkpoint: Option<PathBuf>,
    pub sampler_steps: usize,
    pub count: usize,
    pub source: String,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub format: Option<String>,
    pub seed: u64,
}

impl Default for DataGenConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        DataGenConfig {
            height: m.height,
            width: m.width,
            n_text: m.n_text,
            dim: m.dim,
            heads: m.heads,
            blocks: m.blocks,
            in_dim: m.in_dim,
            classes: m.classes,
            teacher_steps: m.teacher_steps,
            teacher_checkpoint: None,
            sampler_steps: m.sampler_steps,
            count: 16,
            source: "teacher".into(),
            checkpoint: None,
            out: None,
            format: None,
            seed: 0,
        }
    }
}

/// Merges `flags` over the TOML file over the defaults of `C`.
pub fn resolve<A: Serialize, C: DeserializeOwned>(flags: &A, file: Option<&Path>) -> CliResult<C> {
    let mut merged = serde_json::Map::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        match serde_json::to_value(table).map_err(|e| CliError::Config(e.to_string()))? {
            Value::Object(m) => merged.extend(m),
            _ => unreachable!("a TOML table is an object"),
        }
    }
    match serde_json::to_value(flags).map_err(|e| CliError::Config(e.to_string()))? {
        Value::Object(m) => merged.extend(m),
        _ => return Err(CliError::Config("flags did not serialize to a map".into())),
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::Config(e.to_string()))
}

fn provenance(command: &str, cfg: &impl Serialize) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    if let Value::Object(m) = &mut v {
        m.insert("command".into(), Value::from(command));
    }
    v
}

/// Fails early, as a configuration error, when `path` cannot be written.
fn check_writable(path: &Option<PathBuf>) -> CliResult<()> {
    if let Some(p) = path {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(p)
            .map_err(|e| CliError::Config(format!("cannot write {}: {e}", p.display())))?;
    }
    Ok(())
}

fn report_format(path: &Path, format: &Option<String>) -> CliResult<Format> {
    match format.as_deref() {
        None => Ok(Format::from_path(path)),
        Some("csv") => Ok(Format::Csv),
        Some("json") => Ok(Format::Json),
        Some(other) => Err(CliError::Config(format!("unknown format '{other}' (csv, json)"))),
    }
}

fn emit(table: &Table, path: &Option<PathBuf>, format: &Option<String>, prov: &Value) -> CliResult<()> {
    if let Some(p) = path {
        table.emit(p, report_format(p, format)?, Some(prov))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

/// SHA-256 of a matrix's shape and little-endian `f64` payload.
pub fn matrix_sha256(m: &Matrix) -> String {
    let mut h = Sha256::new();
    h.update((m.rows() as u64).to_le_bytes());
    h.update((m.cols() as u64).to_le_bytes());
    for v in m.as_slice() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let file = cli.config.as_deref();
    match &cli.command {
        Command::Mask(a) => cmd_mask(resolve(a, file)?),
        Command::Flops(a) => cmd_flops(resolve(a, file)?),
        Command::Rank(a) => cmd_rank(resolve(a, file)?),
        Command::AttnBench(a) => cmd_bench(resolve(a, file)?),
        Command::Distill(a) => cmd_distill(resolve(a, file)?),
        Command::Parallel(a) => cmd_parallel(resolve(a, file)?),
        Command::DataGen(a) => cmd_data_gen(resolve(a, file)?),
    }
}

fn cmd_mask(cfg: MaskConfig) -> CliResult<()> {
    let pattern = cfg.pattern()?;
    check_writable(&cfg.out)?;
    let grid = cfg.grid();
    let popcount = pattern.streamed_popcount(&grid);
    let n = grid.n_tokens() as f64;
    println!("tokens={}", grid.n_tokens());
    println!("popcount={popcount}");
    let mut rank = None;
    if cfg.stats {
        let corner = pattern.row_count(&grid, grid.n_text);
        println!("sparsity={}", 1.0 - popcount as f64 / (n * n));
        println!("corner_row_count={corner}");
        if grid.height <= EXACT_RANK_MAX_SIDE && grid.width <= EXACT_RANK_MAX_SIDE {
            let mask = AttentionMask::build(grid, pattern)?;
            let r = exact_rank_bool(&mask.image_block());
            println!("image_rank={r}");
            rank = Some(r);
        }
    }
    let Some(path) = &cfg.out else { return Ok(()) };
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    match ext {
        "csv" | "json" => {
            let mut t = Table::new(
                &["method", "H", "W", "n_text", "params", "popcount", "sparsity", "image_rank"],
                1,
            );
            let params = pattern
                .params()
                .iter()
                .map(|p| p.to_string())
                .collect::<Vec<_>>()
                .join(";");
            t.push(vec![
                pattern.name().into(),
                grid.height.into(),
                grid.width.into(),
                grid.n_text.into(),
                params.into(),
                Cell::Int(popcount as i64),
                (1.0 - popcount as f64 / (n * n)).into(),
                rank.into(),
            ])?;
            emit(&t, &cfg.out, &cfg.format, &provenance("mask", &cfg))?;
        }
        _ => {
            let mask = AttentionMask::build(grid, pattern)?;
            let f = std::io::BufWriter::new(std::fs::File::create(path).map_err(LabError::from)?);
            if ext == "pbm" {
                mask.write_pbm(f)?;
            } else {
                mask.write_to(f)?;
            }
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn cmd_flops(cfg: FlopsConfig) -> CliResult<()> {
    if cfg.preset != "flux" {
        return Err(CliError::Config(format!("unknown preset '{}' (flux)", cfg.preset)));
    }
    check_writable(&cfg.out)?;
    let flux = FluxConfig::default();
    let report = flux_cost_table(&flux, &cfg.resolutions, &cfg.radii)?;
    println!("{:<6} {:>6} {:>7} {:>14} {:>12} {:>10}", "method", "res", "radius", "GFLOPS", "TFLOPS", "reduction");
    for r in &report.rows {
        let red = r
            .radius
            .and_then(|rad| report.reduction(r.resolution, rad))
            .map_or(String::from("-"), |x| format!("{:.4}", x));
        let rad = r.radius.map_or(String::from("-"), |x| x.to_string());
        println!(
            "{:<6} {:>6} {:>7} {:>14.3} {:>12.4} {:>10}",
            r.method,
            r.resolution,
            rad,
            r.gflops(),
            r.tflops(),
            red
        );
    }
    emit(&report.table(), &cfg.out, &cfg.format, &provenance("flops", &cfg))
}

fn cmd_rank(cfg: MaskConfig) -> CliResult<()> {
    let pattern = cfg.pattern()?;
    check_writable(&cfg.out)?;
    let grid = cfg.grid();
    if grid.height > EXACT_RANK_MAX_SIDE || grid.width > EXACT_RANK_MAX_SIDE {
        return Err(CliError::Config(format!(
            "rank needs H, W <= {EXACT_RANK_MAX_SIDE}"
        )));
    }
    let mask = AttentionMask::build(grid, pattern)?;
    let block = mask.image_block();
    let exact = exact_rank_bool(&block);
    let dense = Matrix::from_fn(block.len(), block.len(), |i, j| f64::from(u8::from(block[i][j])));
    let numeric = rank_of(&dense, DEFAULT_RANK_TOL)?;
    let windows = match pattern {
        MaskPattern::Swin { window, shift, layer } => Some(swin_window_count(&grid, window, shift, layer)),
        _ => None,
    };
    println!("exact_rank={exact}");
    println!("numeric_rank={numeric}");
    if let Some(w) = windows {
        println!("window_count={w}");
    }
    let mut t = Table::new(&["method", "H", "W", "params", "exact_rank", "numeric_rank", "window_count"], 1);
    let params = pattern.params().iter().map(|p| p.to_string()).collect::<Vec<_>>().join(";");
    t.push(vec![
        pattern.name().into(),
        grid.height.into(),
        grid.width.into(),
        params.into(),
        exact.into(),
        numeric.into(),
        windows.into(),
    ])?;
    emit(&t, &cfg.out, &cfg.format, &provenance("rank", &cfg))
}

fn cmd_bench(cfg: BenchConfig) -> CliResult<()> {
    let method = cfg.attention_method()?;
    check_writable(&cfg.out)?;
    let grid = TokenGrid::new(cfg.n_text, cfg.height, cfg.width);
    if cfg.channels == 0 {
        return Err(CliError::Config("channels must be positive".into()));
    }
    let inputs = AttentionInputs::random(grid, cfg.channels, cfg.seed);
    let out = method.apply(&inputs)?;
    let full = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Full)?)?;
    let rel = out.rel_err(&full);
    let hash = matrix_sha256(&out);
    let popcount = match method {
        AttentionMethod::Masked { pattern } => Some(pattern.analytic_popcount(&grid)),
        _ => None,
    };
    println!("method={}", method.name());
    println!("rel_err_vs_full={}", format_float(rel));
    if let Some(p) = popcount {
        println!("flops={}", flops_of_popcount(p, cfg.channels as u64));
    }
    println!("output_sha256={hash}");
    let mut t = Table::new(&["method", "n_tokens", "channels", "popcount", "rel_err_vs_full", "output_sha256"], 1);
    t.push(vec![
        method.name().into(),
        grid.n_tokens().into(),
        cfg.channels.into(),
        popcount.map(|p| p as i64).into(),
        rel.into(),
        hash.into(),
    ])?;
    emit(&t, &cfg.out, &cfg.format, &provenance("attn-bench", &cfg))
}

fn cmd_distill(cfg: DistillRunConfig) -> CliResult<()> {
    let model = cfg.model();
    let dc = DistillConfig {
        alpha: cfg.alpha,
        beta: cfg.beta,
        attn_loss_layers: (cfg.blocks / 2..cfg.blocks).collect(),
        steps: cfg.steps,
        batch: cfg.batch,
        lr: cfg.lr,
        seed: cfg.seed.wrapping_add(4),
    };
    dc.validate(cfg.blocks)?;
    model.dit().validate()?;
    if cfg.dataset_size == 0 {
        return Err(CliError::Config("dataset-size must be positive".into()));
    }
    check_writable(&cfg.out)?;
    check_writable(&cfg.checkpoint)?;
    let pattern = MaskPattern::Clear { radius: cfg.r };
    pattern.validate(&model.dit().grid())?;
    let (teacher, task) = model.teacher(cfg.seed)?;
    let data = dataset(&cfg.data, &teacher, &task, cfg.dataset_size, cfg.sampler_steps, cfg.seed.wrapping_add(2))?;
    let eval = eval_samples(&data, 32, cfg.seed.wrapping_add(3));
    let mut student = teacher.student(pattern)?;
    let before = mean_distill_losses(&student, &teacher, &eval, &dc)?;
    let curve = train_distill(&mut student, &teacher, &data, &dc)?;
    let after = mean_distill_losses(&student, &teacher, &eval, &dc)?;
    println!("eval_L_pred_initial={}", before.l_pred);
    println!("eval_L_pred_final={}", after.l_pred);
    println!("eval_L_pred_ratio={}", after.l_pred / before.l_pred);
    println!("eval_L_attn_initial={}", before.l_attn);
    println!("eval_L_attn_final={}", after.l_attn);
    if let Some(p) = &cfg.checkpoint {
        let f = std::io::BufWriter::new(std::fs::File::create(p).map_err(LabError::from)?);
        student.save(f)?;
        println!("wrote {}", p.display());
    }
    emit(&loss_table(&curve), &cfg.out, &cfg.format, &provenance("distill", &cfg))
}

fn dataset(
    source: &str,
    teacher: &ToyDit,
    task: &SyntheticTask,
    count: usize,
    sampler_steps: usize,
    seed: u64,
) -> CliResult<Vec<DataPair>> {
    match source {
        "teacher" => Ok(generate_teacher_dataset(teacher, task, count, sampler_steps, seed)?),
        "external" => Ok(task.dataset(count, seed)),
        other => Err(CliError::Config(format!("unknown data source '{other}' (teacher, external)"))),
    }
}

fn cmd_parallel(cfg: ParallelConfig) -> CliResult<()> {
    check_writable(&cfg.out)?;
    check_writable(&cfg.ledger)?;
    let prov = provenance("parallel", &cfg);
    match cfg.mode.as_str() {
        "attention" => {
            let grid = TokenGrid::new(cfg.n_text, cfg.height, cfg.width);
            let plan = make_plan(grid, cfg.workers, cfg.r)?;
            if cfg.channels == 0 {
                return Err(CliError::Config("channels must be positive".into()));
            }
            let inputs = AttentionInputs::random(grid, cfg.channels, cfg.seed);
            let d = distributed_clear_attention(&plan, &inputs)?;
            let single = masked_attention(&inputs, &AttentionMask::build(grid, MaskPattern::Clear { radius: cfg.r })?)?;
            let rel = d.out.rel_err(&single);
            let comm = comm_report(&plan, CommMode::Clear);
            println!("workers={}", plan.workers());
            println!("rel_err_vs_single_worker={}", format_float(rel));
            println!("halo_tokens={}", d.ledger.total_tokens(MsgKind::HaloKv));
            println!("text_partial_tokens={}", d.ledger.total_tokens(MsgKind::TextPartial));
            println!("comm_ratio_vs_full_sync={}", comm.ratio);
            println!("output_sha256={}", matrix_sha256(&d.out));
            emit(&d.ledger.table(), &cfg.ledger, &None, &prov)?;
            let mut t = Table::new(
                &["workers", "radius", "rel_err_vs_single_worker", "halo_tokens", "comm_ratio", "output_sha256"],
                1,
            );
            t.push(vec![
                plan.workers().into(),
                cfg.r.into(),
                rel.into(),
                d.ledger.total_tokens(MsgKind::HaloKv).into(),
                comm.ratio.into(),
                matrix_sha256(&d.out).into(),
            ])?;
            emit(&t, &cfg.out, &cfg.format, &prov)
        }
        "inference" => {
            let text_mode = match cfg.text_mode.as_str() {
                "exact" => TextMode::Exact,
                "average" => TextMode::PatchAverage,
                other => return Err(CliError::Config(format!("unknown text-mode '{other}' (exact, average)"))),
            };
            let student = match &cfg.checkpoint {
                Some(p) => {
                    let f = std::fs::File::open(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                    ToyDit::load(std::io::BufReader::new(f))?
                }
                None => {
                    let dit = DitConfig {
                        height: cfg.height,
                        width: cfg.width,
                        n_text: cfg.n_text,
                        ..DitConfig::default()
                    };
                    ToyDit::new(dit, cfg.seed)?.student(MaskPattern::Clear { radius: cfg.r })?
                }
            };
            let grid = student.grid();
            let plan = make_plan(grid, cfg.workers, cfg.r)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
            let z = Matrix::randn(grid.n_image(), student.config().in_dim, 1.0, &mut rng);
            let y = Matrix::randn(grid.n_text, student.config().dim, 1.0, &mut rng);
            let reference = reference_inference(&student, &z, &y, cfg.steps)?;
            let run = simulate_inference(&plan, &student, &z, &y, cfg.steps, text_mode)?;
            let gap = run.final_latent().max_abs_diff(reference.last().expect("steps > 0"));
            println!("workers={}", plan.workers());
            println!("final_max_abs_gap={}", format_float(gap));
            println!("ledger_conserved={}", run.ledger.is_conserved());
            println!("output_sha256={}", matrix_sha256(run.final_latent()));
            emit(&run.ledger.table(), &cfg.ledger, &None, &prov)?;
            emit(&divergence_table(&reference, &run.trajectory)?, &cfg.out, &cfg.format, &prov)
        }
        other => Err(CliError::Config(format!("unknown mode '{other}' (attention, inference)"))),
    }
}

fn cmd_data_gen(cfg: DataGenConfig) -> CliResult<()> {
    let model = ModelConfig {
        height: cfg.height,
        width: cfg.width,
        n_text: cfg.n_text,
        dim: cfg.dim,
        heads: cfg.heads,
        blocks: cfg.blocks,
        in_dim: cfg.in_dim,
        classes: cfg.classes,
        teacher_steps: cfg.teacher_steps,
        teacher_checkpoint: cfg.teacher_checkpoint.clone(),
        sampler_steps: cfg.sampler_steps,
    };
    model.dit().validate()?;
    if !matches!(cfg.source.as_str(), "teacher" | "external") {
        return Err(CliError::Config(format!("unknown source '{}' (teacher, external)", cfg.source)));
    }
    check_writable(&cfg.out)?;
    check_writable(&cfg.checkpoint)?;
    let (teacher, task) = model.teacher(cfg.seed)?;
    let data = dataset(&cfg.source, &teacher, &task, cfg.count, cfg.sampler_steps, cfg.seed.wrapping_add(2))?;
    if let Some(p) = &cfg.checkpoint {
        let f = std::io::BufWriter::new(std::fs::File::create(p).map_err(LabError::from)?);
        teacher.save(f)?;
        println!("wrote {}", p.display());
    }
    let mut t = Table::new(&["sample", "class", "token", "channel", "value"], 4);
    for (s, pair) in data.iter().enumerate() {
        for tok in 0..pair.z0.rows() {
            for ch in 0..pair.z0.cols() {
                t.push(vec![s.into(), pair.class.into(), tok.into(), ch.into(), pair.z0[(tok, ch)].into()])?;
            }
        }
    }
    println!("samples={}", data.len());
    emit(&t, &cfg.out, &cfg.format, &provenance("data-gen", &cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("clear-lab").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_file_override_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "H = 5\nr = 1.5\nmethod = \"clear\"\n").unwrap();
        let cli = parse(&["mask", "--r", "2.5"]);
        let Command::Mask(a) = &cli.command else { panic!() };
        let cfg: MaskConfig = resolve(a, Some(&path)).unwrap();
        assert_eq!((cfg.height, cfg.width, cfg.r), (5, 8, 2.5));
    }

    #[test]
    fn unknown_file_key_is_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "radius = 3\n").unwrap();
        let cli = parse(&["mask"]);
        let Command::Mask(a) = &cli.command else { panic!() };
        let r: CliResult<MaskConfig> = resolve(a, Some(&path));
        assert!(matches!(r, Err(CliError::Config(_))));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(run(["clear-lab", "mask", "--bogus"]), EXIT_CONFIG);
        assert_eq!(run(["clear-lab", "mask", "--method", "clear", "--r", "-1"]), EXIT_CONFIG);
        assert_eq!(run(["clear-lab", "mask", "--H", "3", "--W", "3", "--n-text", "0", "--r", "2", "--stats"]), EXIT_OK);
        assert_eq!(run(["clear-lab", "mask", "--out", "/nonexistent-dir/x.csv"]), EXIT_CONFIG);
        assert_eq!(run(["clear-lab", "flops", "--preset", "sdxl"]), EXIT_CONFIG);
        assert_eq!(run(["clear-lab", "flops", "--resolutions", "1000"]), EXIT_CONFIG);
        assert_eq!(run(["clear-lab", "--help"]), EXIT_OK);
    }

    #[test]
    fn every_subcommand_has_help() {
        for sub in ["mask", "flops", "rank", "attn-bench", "distill", "parallel", "data-gen"] {
            assert_eq!(run(["clear-lab", sub, "--help"]), EXIT_OK, "{sub}");
        }
    }

    #[test]
    fn hash_is_shape_sensitive() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(3, 2);
        assert_ne!(matrix_sha256(&a), matrix_sha256(&b));
        assert_eq!(matrix_sha256(&a).len(), 64);
    }
}
