//! Trained-model directory layout: `params.bin` (checkpoint format),
//! `vocab_target.txt` (+ `vocab_source.txt` for bilingual models), and
//! `model.json` describing the architecture, so `predict`/`backtranslate`
//! can rebuild the model without the original config.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use clmrc_core::dual::{DualConfig, DualParams, LambdaMode};
use clmrc_core::encoder::EncoderConfig;
use clmrc_core::params::{load_checkpoint, save_checkpoint, ParamGroup};
use clmrc_core::span::SingleModelParams;
use clmrc_core::tensor::Tensor;
use clmrc_core::text::{TokenizeMode, Vocabulary};

use crate::config::ModelKind;

#[derive(Debug, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    pub target_tokenizer: TokenizeMode,
    pub source_tokenizer: TokenizeMode,
    pub max_answer_len: usize,
    pub use_saa: bool,
    pub saa_heads: usize,
    pub fixed_lambda: Option<f64>,
    pub whole_sequence_softmax: bool,
}

impl ModelSpec {
    pub fn dual_config(&self) -> DualConfig {
        let mut config = DualConfig::new(self.encoder.clone());
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
}

pub enum LoadedModel {
    Single {
        spec: ModelSpec,
        params: SingleModelParams<Tensor>,
        vocab: Vocabulary,
    },
    Dual {
        spec: ModelSpec,
        params: DualParams<Tensor>,
        vocab_target: Vocabulary,
        vocab_source: Vocabulary,
    },
}

pub fn save_model(
    dir: &Path,
    spec: &ModelSpec,
    params: &dyn ParamGroup,
    vocab_target: &Vocabulary,
    vocab_source: Option<&Vocabulary>,
) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let body = serde_json::to_string_pretty(spec)?;
    std::fs::write(dir.join("model.json"), body)?;
    save_checkpoint(params, &dir.join("params.bin"))?;
    vocab_target.save(&dir.join("vocab_target.txt"))?;
    if let Some(vocab) = vocab_source {
        vocab.save(&dir.join("vocab_source.txt"))?;
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<LoadedModel> {
    let spec_path = dir.join("model.json");
    let body = std::fs::read_to_string(&spec_path)
        .with_context(|| format!("reading {}", spec_path.display()))?;
    let spec: ModelSpec = serde_json::from_str(&body)
        .with_context(|| format!("parsing {}", spec_path.display()))?;
    let vocab_target = Vocabulary::load(&dir.join("vocab_target.txt"), spec.target_tokenizer)?;
    match spec.kind {
        ModelKind::Dual => {
            let vocab_source =
                Vocabulary::load(&dir.join("vocab_source.txt"), spec.source_tokenizer)?;
            let config = spec.dual_config();
            let mut params = DualParams::init(&config)?;
            load_checkpoint(&mut params, &dir.join("params.bin"))?;
            Ok(LoadedModel::Dual {
                spec,
                params,
                vocab_target,
                vocab_source,
            })
        }
        _ => {
            let mut params = SingleModelParams::init(&spec.encoder)?;
            load_checkpoint(&mut params, &dir.join("params.bin"))?;
            Ok(LoadedModel::Single {
                spec,
                params,
                vocab: vocab_target,
            })
        }
    }
}

pub fn expect_single(model: LoadedModel) -> Result<(ModelSpec, SingleModelParams<Tensor>, Vocabulary)> {
    match model {
        LoadedModel::Single {
            spec,
            params,
            vocab,
        } => Ok((spec, params, vocab)),
        LoadedModel::Dual { .. } => bail!("expected a single-encoder model, found a dual model"),
    }
}
