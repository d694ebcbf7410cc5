//! Run configuration: a JSON file with every field defaulted, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use clmrc_core::data::SyntheticConfig;
use clmrc_core::dual::{DualConfig, LambdaMode};
use clmrc_core::encoder::EncoderConfig;
use clmrc_core::text::TokenizeMode;
use clmrc_core::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Reader,
    Aligner,
    Verifier,
    Dual,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelKind,
    pub seed: u64,

    // Encoder shape.
    pub vocab_size: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    pub max_len: usize,
    pub dropout_rate: f64,

    // Optimization (paper-scale defaults; desk runs override).
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub max_answer_len: usize,

    // Bilingual decoding options.
    pub use_saa: bool,
    pub saa_heads: usize,
    pub fixed_lambda: Option<f64>,
    pub whole_sequence_softmax: bool,

    // Translation / alignment.
    pub delta: usize,
    pub noise_rate: f64,
    pub target_tokenizer: TokenizeMode,
    pub source_tokenizer: TokenizeMode,

    // Data paths.
    pub train_file: Option<PathBuf>,
    pub dev_file: Option<PathBuf>,
    pub dict: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub out: Option<PathBuf>,

    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelKind::Reader,
            seed: 0,
            vocab_size: 256,
            hidden_size: 64,
            num_layers: 2,
            num_heads: 4,
            ffn_size: 128,
            max_len: 64,
            dropout_rate: 0.1,
            learning_rate: 4e-5,
            batch_size: 64,
            epochs: 2,
            weight_decay: 0.01,
            max_answer_len: 30,
            use_saa: true,
            saa_heads: 1,
            fixed_lambda: None,
            whole_sequence_softmax: false,
            delta: 3,
            noise_rate: 0.0,
            target_tokenizer: TokenizeMode::Whitespace,
            source_tokenizer: TokenizeMode::Whitespace,
            train_file: None,
            dev_file: None,
            dict: None,
            params: None,
            predictions: None,
            out: None,
            synthetic: SyntheticConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&body)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(config)
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: self.vocab_size,
            hidden_size: self.hidden_size,
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            ffn_size: self.ffn_size,
            max_len: self.max_len,
            dropout_rate: self.dropout_rate,
            seed: self.seed,
        }
    }

    pub fn dual_config(&self) -> DualConfig {
        let mut config = DualConfig::new(self.encoder_config());
        config.saa_heads = self.saa_heads;
        config.use_saa = self.use_saa;
        config.lambda_mode = match self.fixed_lambda {
            Some(v) => LambdaMode::Fixed(v),
            None => LambdaMode::Dynamic,
        };
        config.whole_sequence_softmax = self.whole_sequence_softmax;
        config.max_answer_len = self.max_answer_len;
        config
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            weight_decay: self.weight_decay,
            seed: self.seed,
            max_answer_len: self.max_answer_len,
        }
    }
}
