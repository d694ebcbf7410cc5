//! Mini-batch training loops for the single-encoder models and the
//! bilingual model, plus prediction and evaluation helpers.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BilingualExample, MRCExample};
use crate::dual::{dual_forward_loss, dual_predict, DualConfig, DualParams};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::metrics::{evaluate_dataset, EvalResult};
use crate::optim::{AdamW, AdamWConfig};
use crate::span::{
    decode_span, pack_input, single_forward, span_loss, PackingKind, SingleModelParams,
};
use crate::tape::Tape;
use crate::text::{char_span_to_token_span, EncodedPair, TokenSpan, Vocabulary};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub max_answer_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        // Paper-scale optimization defaults; desk runs override them.
        TrainConfig {
            learning_rate: 4e-5,
            batch_size: 64,
            epochs: 2,
            weight_decay: 0.01,
            seed: 0,
            max_answer_len: 30,
        }
    }
}

/// One line of the training metric log, emitted per optimizer step.
/// Dev scores appear on epoch-boundary steps only.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub lr: f64,
    pub target_loss: f64,
    pub aux_loss: f64,
    pub lambda_mean: f64,
    pub dev_em: Option<f64>,
    pub dev_f1: Option<f64>,
}

/// Input record for reader/aligner/verifier training: the example plus
/// the translated answer those packings need.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SingleExample {
    pub example: MRCExample,
    pub translated_answer: Option<String>,
}

impl SingleExample {
    pub fn reader(example: MRCExample) -> Self {
        SingleExample {
            example,
            translated_answer: None,
        }
    }
}

fn resolve_gold(pair: &EncodedPair, example: &MRCExample) -> Result<TokenSpan> {
    let answer = example.primary_answer().ok_or_else(|| Error::Supervision {
        id: example.id.clone(),
        reason: "example has no answer".into(),
    })?;
    char_span_to_token_span(pair, answer.char_start, answer.text.chars().count())?.ok_or_else(
        || Error::Supervision {
            id: example.id.clone(),
            reason: "gold span truncated away".into(),
        },
    )
}

fn pack_single(
    kind: PackingKind,
    item: &SingleExample,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedPair> {
    pack_input(
        kind,
        &item.example.passage,
        Some(&item.example.question),
        item.translated_answer.as_deref(),
        vocab,
        max_len,
    )
}

fn shuffled_batches(
    n: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|c| c.to_vec())
        .collect()
}

fn total_steps(n: usize, batch_size: usize, epochs: usize) -> u64 {
    let per_epoch = n.div_ceil(batch_size.max(1));
    (per_epoch * epochs) as u64
}

/// Train a reader/aligner/verifier on its packed inputs.
pub fn train_single(
    params: &mut SingleModelParams<crate::tensor::Tensor>,
    config: &EncoderConfig,
    kind: PackingKind,
    train: &[SingleExample],
    dev: Option<&[SingleExample]>,
    vocab: &Vocabulary,
    tc: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::new(
            tc.learning_rate,
            total_steps(train.len(), tc.batch_size, tc.epochs),
        )
    })?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xd20b);
    let mut log = Vec::new();

    for epoch in 0..tc.epochs {
        let batches = shuffled_batches(train.len(), tc.batch_size, &mut shuffle_rng);
        let last_batch = batches.len() - 1;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let lr = optimizer.effective_lr();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut sum_loss = None;
            for &idx in batch {
                let item = &train[idx];
                let pair = pack_single(kind, item, vocab, config.max_len)?;
                let gold = resolve_gold(&pair, &item.example)?;
                let dropout = if config.dropout_rate > 0.0 {
                    Some(&mut dropout_rng)
                } else {
                    None
                };
                let (start, end) = single_forward(&mut tape, &bound, config, &pair, dropout)?;
                let loss = span_loss(&mut tape, start, end, gold)?;
                sum_loss = Some(match sum_loss {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
            }
            let batch_loss = tape.scale(sum_loss.expect("nonempty batch"), 1.0 / batch.len() as f64);
            let loss_value = tape.value(batch_loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: optimizer.step_count(),
                });
            }
            tape.backward(batch_loss)?;
            let grads = bound.collect_grads(&tape);
            optimizer.step(params, &grads)?;

            let mut record = MetricRecord {
                step: optimizer.step_count(),
                lr,
                target_loss: loss_value,
                aux_loss: 0.0,
                lambda_mean: 0.0,
                dev_em: None,
                dev_f1: None,
            };
            if batch_idx == last_batch {
                if let Some(dev) = dev {
                    let result = evaluate_single(params, config, kind, dev, vocab, tc)?;
                    record.dev_em = Some(result.em);
                    record.dev_f1 = Some(result.f1);
                }
            }
            log.push(record);
        }
        log::info!(
            "epoch {epoch}: loss {:.4}",
            log.last().map(|r| r.target_loss).unwrap_or(f64::NAN)
        );
    }
    Ok(log)
}

/// Eval-mode predictions for packed single-encoder inputs.
pub fn predict_single(
    params: &SingleModelParams<crate::tensor::Tensor>,
    config: &EncoderConfig,
    kind: PackingKind,
    examples: &[SingleExample],
    vocab: &Vocabulary,
    max_answer_len: usize,
    provenance: &str,
) -> Result<BTreeMap<String, String>> {
    let mut predictions = BTreeMap::new();
    for item in examples {
        let pair = pack_single(kind, item, vocab, config.max_len)?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let (start, end) = single_forward(&mut tape, &bound, config, &pair, None)?;
        let prediction = decode_span(
            tape.value(start),
            tape.value(end),
            &pair,
            max_answer_len,
            provenance,
        )?;
        predictions.insert(item.example.id.clone(), prediction.text);
    }
    Ok(predictions)
}

pub fn evaluate_single(
    params: &SingleModelParams<crate::tensor::Tensor>,
    config: &EncoderConfig,
    kind: PackingKind,
    examples: &[SingleExample],
    vocab: &Vocabulary,
    tc: &TrainConfig,
) -> Result<EvalResult> {
    let predictions = predict_single(
        params,
        config,
        kind,
        examples,
        vocab,
        tc.max_answer_len,
        "eval",
    )?;
    let plain: Vec<MRCExample> = examples.iter().map(|e| e.example.clone()).collect();
    evaluate_dataset(&predictions, &plain)
}

/// Train the bilingual model on paired examples.
pub fn train_dual(
    params: &mut DualParams<crate::tensor::Tensor>,
    config: &DualConfig,
    train: &[BilingualExample],
    dev: Option<&[BilingualExample]>,
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
    tc: &TrainConfig,
) -> Result<Vec<MetricRecord>> {
    if train.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    config.validate()?;
    let mut optimizer = AdamW::new(AdamWConfig {
        weight_decay: tc.weight_decay,
        ..AdamWConfig::new(
            tc.learning_rate,
            total_steps(train.len(), tc.batch_size, tc.epochs),
        )
    })?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xd20b);
    let mut log = Vec::new();

    for epoch in 0..tc.epochs {
        let batches = shuffled_batches(train.len(), tc.batch_size, &mut shuffle_rng);
        let last_batch = batches.len() - 1;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let lr = optimizer.effective_lr();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let mut sum_loss = None;
            let mut target_sum = 0.0;
            let mut aux_sum = 0.0;
            let mut lambda_sum = 0.0;
            for &idx in batch {
                let dropout = if config.encoder.dropout_rate > 0.0 {
                    Some(&mut dropout_rng)
                } else {
                    None
                };
                let out = dual_forward_loss(
                    &mut tape,
                    &train[idx],
                    &bound,
                    vocab_target,
                    vocab_source,
                    config,
                    dropout,
                )?;
                target_sum += out.target_loss;
                aux_sum += out.aux_loss.unwrap_or(0.0);
                lambda_sum += out.lambda.value;
                sum_loss = Some(match sum_loss {
                    Some(acc) => tape.add(acc, out.loss)?,
                    None => out.loss,
                });
            }
            let n = batch.len() as f64;
            let batch_loss = tape.scale(sum_loss.expect("nonempty batch"), 1.0 / n);
            let loss_value = tape.value(batch_loss).item();
            if !loss_value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: optimizer.step_count(),
                });
            }
            tape.backward(batch_loss)?;
            let grads = bound.collect_grads(&tape);
            optimizer.step(params, &grads)?;

            let mut record = MetricRecord {
                step: optimizer.step_count(),
                lr,
                target_loss: target_sum / n,
                aux_loss: aux_sum / n,
                lambda_mean: lambda_sum / n,
                dev_em: None,
                dev_f1: None,
            };
            if batch_idx == last_batch {
                if let Some(dev) = dev {
                    let result = evaluate_dual(params, config, dev, vocab_target, vocab_source)?;
                    record.dev_em = Some(result.em);
                    record.dev_f1 = Some(result.f1);
                }
            }
            log.push(record);
        }
        log::info!(
            "epoch {epoch}: loss {:.4}",
            log.last().map(|r| r.target_loss).unwrap_or(f64::NAN)
        );
    }
    Ok(log)
}

pub fn predict_dual_predictions(
    params: &DualParams<crate::tensor::Tensor>,
    config: &DualConfig,
    examples: &[BilingualExample],
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
) -> Result<BTreeMap<String, String>> {
    let mut predictions = BTreeMap::new();
    for example in examples {
        let prediction = dual_predict(params, config, example, vocab_target, vocab_source)?;
        predictions.insert(example.target.id.clone(), prediction.text);
    }
    Ok(predictions)
}

pub fn evaluate_dual(
    params: &DualParams<crate::tensor::Tensor>,
    config: &DualConfig,
    examples: &[BilingualExample],
    vocab_target: &Vocabulary,
    vocab_source: &Vocabulary,
) -> Result<EvalResult> {
    let predictions =
        predict_dual_predictions(params, config, examples, vocab_target, vocab_source)?;
    let targets: Vec<MRCExample> = examples.iter().map(|b| b.target.clone()).collect();
    evaluate_dataset(&predictions, &targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_bilingual, SyntheticConfig};
    use crate::text::TokenizeMode;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 96,
            hidden_size: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_size: 32,
            max_len: 24,
            dropout_rate: 0.0,
            seed: 1,
        }
    }

    fn synth(n: usize, seed: u64) -> (Vec<SingleExample>, Vocabulary) {
        let data = generate_synthetic_bilingual(&SyntheticConfig {
            num_examples: n,
            passage_len_range: (6, 9),
            answer_len_range: (1, 2),
            seed,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let examples: Vec<SingleExample> = data
            .target_examples()
            .into_iter()
            .map(SingleExample::reader)
            .collect();
        let corpus: Vec<String> = examples
            .iter()
            .flat_map(|e| [e.example.passage.clone(), e.example.question.clone()])
            .collect();
        let vocab = Vocabulary::build(&corpus, TokenizeMode::Whitespace, 96).unwrap();
        (examples, vocab)
    }

    #[test]
    fn single_example_memorization() {
        let config = tiny_config();
        let (examples, vocab) = synth(1, 3);
        let mut params = SingleModelParams::init(&config).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-2,
            batch_size: 1,
            epochs: 200,
            weight_decay: 0.0,
            seed: 0,
            max_answer_len: 8,
        };
        let log = train_single(
            &mut params,
            &config,
            PackingKind::Reader,
            &examples,
            None,
            &vocab,
            &tc,
        )
        .unwrap();
        let final_loss = log.last().unwrap().target_loss;
        assert!(final_loss < 0.01, "memorization failed, loss {final_loss}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let config = tiny_config();
        let (examples, vocab) = synth(8, 5);
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 4,
            epochs: 2,
            weight_decay: 0.01,
            seed: 9,
            max_answer_len: 8,
        };
        let run = || {
            let mut params = SingleModelParams::init(&config).unwrap();
            train_single(
                &mut params,
                &config,
                PackingKind::Reader,
                &examples,
                Some(&examples),
                &vocab,
                &tc,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn dual_training_runs_and_logs_lambda() {
        let config = DualConfig::new(tiny_config());
        let data = generate_synthetic_bilingual(&SyntheticConfig {
            num_examples: 6,
            passage_len_range: (6, 9),
            answer_len_range: (1, 2),
            seed: 4,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let corpus_t: Vec<String> = data
            .examples
            .iter()
            .flat_map(|b| [b.target.passage.clone(), b.target.question.clone()])
            .collect();
        let corpus_s: Vec<String> = data
            .examples
            .iter()
            .flat_map(|b| [b.source.passage.clone(), b.source.question.clone()])
            .collect();
        let vocab_t = Vocabulary::build(&corpus_t, TokenizeMode::Whitespace, 96).unwrap();
        let vocab_s = Vocabulary::build(&corpus_s, TokenizeMode::Whitespace, 96).unwrap();
        let mut params = DualParams::init(&config).unwrap();
        let tc = TrainConfig {
            learning_rate: 1e-3,
            batch_size: 3,
            epochs: 1,
            weight_decay: 0.0,
            seed: 2,
            max_answer_len: 8,
        };
        let log = train_dual(
            &mut params,
            &config,
            &data.examples,
            Some(&data.examples),
            &vocab_t,
            &vocab_s,
            &tc,
        )
        .unwrap();
        assert_eq!(log.len(), 2);
        assert!(log.iter().all(|r| r.lambda_mean >= 0.0 && r.lambda_mean <= 1.0));
        assert!(log.last().unwrap().dev_em.is_some());
    }
}
