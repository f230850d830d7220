//! Run configuration: an optional TOML file overlaid by command-line flags.

use std::path::Path;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::Args;
use serde::{Deserialize, Serialize};

use revlab::model::{ModelConfig, PosMode};
use revlab::verify::{OptimizerKind, TrainConfig};

/// Target vocabulary for the tokenizer pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VocabSize {
    Target(usize),
    Named(Alphabet),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alphabet {
    Alphabet,
}

impl VocabSize {
    pub const ALPHABET: VocabSize = VocabSize::Named(Alphabet::Alphabet);

    /// `None` means character level.
    pub fn target(self) -> Option<usize> {
        match self {
            VocabSize::Target(n) => Some(n),
            VocabSize::Named(_) => None,
        }
    }
}

impl FromStr for VocabSize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s == "alphabet" {
            return Ok(VocabSize::ALPHABET);
        }
        s.parse()
            .map(VocabSize::Target)
            .map_err(|_| format!("expected a number or \"alphabet\", got {s:?}"))
    }
}

fn parse_pos_mode(s: &str) -> Result<PosMode, String> {
    s.parse().map_err(|e: revlab::Error| e.to_string())
}

fn parse_optimizer(s: &str) -> Result<OptimizerKind, String> {
    s.parse().map_err(|e: revlab::Error| e.to_string())
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub cases: Option<usize>,
    pub vocab_size: Option<VocabSize>,
    pub parallel: Option<bool>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub divergence: DivergenceSection,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub pos_modes: Option<Vec<PosMode>>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub n_layers: Option<usize>,
    pub max_len: Option<usize>,
    pub tie_embeddings: Option<bool>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub optimizer: Option<OptimizerKind>,
    pub seeds: Option<usize>,
}

#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DivergenceSection {
    pub order: Option<usize>,
    pub lambda: Option<f64>,
    pub max_n: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct ModelArgs {
    /// Positional mode; repeat to run several.
    #[arg(long = "pos-mode", value_parser = parse_pos_mode)]
    pub pos_modes: Vec<PosMode>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub n_layers: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Share the embedding and unembedding matrices.
    #[arg(long)]
    pub tied: bool,
}

/// Model settings after overlaying flags on the file.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelSettings {
    pub pos_modes: Vec<PosMode>,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    pub tie_embeddings: bool,
}

impl ModelSettings {
    pub fn resolve(
        args: &ModelArgs,
        file: &ModelSection,
        default_modes: &[PosMode],
    ) -> anyhow::Result<Self> {
        let base = ModelConfig::new(1, PosMode::Rotary);
        let pos_modes = if !args.pos_modes.is_empty() {
            args.pos_modes.clone()
        } else {
            file.pos_modes
                .clone()
                .unwrap_or_else(|| default_modes.to_vec())
        };
        if pos_modes.is_empty() {
            bail!("no positional mode selected");
        }
        let s = ModelSettings {
            pos_modes,
            d_model: args.d_model.or(file.d_model).unwrap_or(base.d_model),
            n_heads: args.n_heads.or(file.n_heads).unwrap_or(base.n_heads),
            n_layers: args.n_layers.or(file.n_layers).unwrap_or(base.n_layers),
            max_len: args.max_len.or(file.max_len).unwrap_or(base.max_len),
            tie_embeddings: args.tied || file.tie_embeddings.unwrap_or(base.tie_embeddings),
        };
        // vocab is filled in by the tokenizer; validate the rest now
        for &mode in &s.pos_modes {
            s.config(2, mode).validate()?;
        }
        Ok(s)
    }

    pub fn config(&self, vocab_size: usize, pos_mode: PosMode) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers: self.n_layers,
            max_len: self.max_len,
            pos_mode,
            tie_embeddings: self.tie_embeddings,
        }
    }
}

#[derive(Clone, Debug, Default, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long, value_parser = parse_optimizer)]
    pub optimizer: Option<OptimizerKind>,
}

pub fn resolve_train(
    args: &TrainArgs,
    file: &TrainSection,
    seed: u64,
) -> anyhow::Result<TrainConfig> {
    let d = TrainConfig::default();
    let optimizer = args.optimizer.or(file.optimizer).unwrap_or(d.optimizer);
    let default_lr = match optimizer {
        OptimizerKind::Sgd => d.learning_rate,
        OptimizerKind::Adam => 0.01,
    };
    let tc = TrainConfig {
        steps: args.steps.or(file.steps).unwrap_or(d.steps),
        batch_size: args.batch_size.or(file.batch_size).unwrap_or(d.batch_size),
        learning_rate: args
            .learning_rate
            .or(file.learning_rate)
            .unwrap_or(default_lr),
        optimizer,
        seed,
        ..d
    };
    tc.validate()?;
    Ok(tc)
}
