//! The zero-shot back-translation pipeline: translate the target
//! question/passage into the source language, answer there with a
//! source-language reader, translate the answer back, and optionally
//! snap it onto an exact passage substring with SimpleMatch.
//!
//! No target-language training data is consumed anywhere in this path.
//! A failure in any stage isolates that example (it scores as an empty
//! prediction); the run never aborts.

use std::collections::BTreeMap;
use std::time::Instant;

use anyhow::Result;
use serde::{Deserialize, Serialize};

use clmrc_core::data::{translate_example, translate_text, MRCExample, TranslatorSpec};
use clmrc_core::encoder::EncoderConfig;
use clmrc_core::metrics::{evaluate_dataset, EvalResult};
use clmrc_core::simplematch::{matched_text, simple_match};
use clmrc_core::span::{decode_span, single_forward, SingleModelParams};
use clmrc_core::tape::Tape;
use clmrc_core::tensor::Tensor;
use clmrc_core::text::{encode_segments, Vocabulary};

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub inputs: usize,
    pub translated: usize,
    pub predicted: usize,
    pub back_translated: usize,
    pub aligned: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stage_seconds: BTreeMap<String, f64>,
    pub counts: StageCounts,
    /// SimpleMatch F1 histogram over ten [0.1) buckets, plus exact 1.0
    /// in the last bucket.
    pub confidence_histogram: [usize; 10],
    pub eval: Option<EvalResult>,
}

pub struct PipelineInputs<'a> {
    pub examples: &'a [MRCExample],
    pub reader: &'a SingleModelParams<Tensor>,
    pub encoder: &'a EncoderConfig,
    pub source_vocab: &'a Vocabulary,
    /// Target-to-source translation.
    pub forward: &'a TranslatorSpec,
    /// Source-to-target translation.
    pub backward: &'a TranslatorSpec,
    pub use_simplematch: bool,
    pub delta: usize,
    pub max_answer_len: usize,
    pub seed: u64,
}

pub fn run_backtranslation_pipeline(
    inputs: &PipelineInputs,
) -> Result<(BTreeMap<String, String>, PipelineReport)> {
    let mut predictions = BTreeMap::new();
    let mut counts = StageCounts {
        inputs: inputs.examples.len(),
        ..StageCounts::default()
    };
    let mut histogram = [0usize; 10];
    let mut stage_seconds: BTreeMap<String, f64> = BTreeMap::new();
    let mut add_time = |stage: &str, start: Instant| {
        *stage_seconds.entry(stage.to_string()).or_insert(0.0) +=
            start.elapsed().as_secs_f64();
    };

    for (idx, example) in inputs.examples.iter().enumerate() {
        let example_seed = inputs.seed.wrapping_add(idx as u64);
        let emit_empty = |predictions: &mut BTreeMap<String, String>,
                          counts: &mut StageCounts| {
            predictions.insert(example.id.clone(), String::new());
            counts.failed += 1;
        };

        // Stage 1: translate the target sample into the source language.
        let start = Instant::now();
        let translated = translate_example(example, inputs.forward, example_seed);
        add_time("translate", start);
        let translated = match translated {
            Ok(t) => {
                counts.translated += 1;
                t.example
            }
            Err(e) => {
                log::warn!("translate failed for {}: {e}", example.id);
                emit_empty(&mut predictions, &mut counts);
                continue;
            }
        };

        // Stage 2: source-language reader answers the translated sample.
        let start = Instant::now();
        let answer = read_answer(inputs, &translated);
        add_time("read", start);
        let source_answer = match answer {
            Ok(text) if !text.is_empty() => {
                counts.predicted += 1;
                text
            }
            Ok(_) => {
                log::warn!("reader produced an empty answer for {}", example.id);
                emit_empty(&mut predictions, &mut counts);
                continue;
            }
            Err(e) => {
                log::warn!("reader failed for {}: {e}", example.id);
                emit_empty(&mut predictions, &mut counts);
                continue;
            }
        };

        // Stage 3: back-translate the answer into the target language.
        let start = Instant::now();
        let back = translate_text(&source_answer, inputs.backward, example_seed ^ 0xb7);
        add_time("back_translate", start);
        let back = match back {
            Ok(text) => {
                counts.back_translated += 1;
                text
            }
            Err(e) => {
                log::warn!("back-translation failed for {}: {e}", example.id);
                emit_empty(&mut predictions, &mut counts);
                continue;
            }
        };

        // Stage 4: optionally align onto an exact passage substring.
        if inputs.use_simplematch {
            let start = Instant::now();
            let aligned = simple_match(&example.passage, &back, inputs.delta);
            add_time("simplematch", start);
            match aligned {
                Ok(m) => {
                    counts.aligned += 1;
                    let bucket = ((m.f1 * 10.0) as usize).min(9);
                    histogram[bucket] += 1;
                    predictions.insert(example.id.clone(), matched_text(&example.passage, &m));
                }
                Err(e) => {
                    log::warn!("simplematch failed for {}: {e}", example.id);
                    emit_empty(&mut predictions, &mut counts);
                }
            }
        } else {
            predictions.insert(example.id.clone(), back);
        }
    }

    let eval = if inputs.examples.iter().all(|e| !e.answers.is_empty()) {
        let start = Instant::now();
        let result = evaluate_dataset(&predictions, inputs.examples)?;
        add_time("evaluate", start);
        Some(result)
    } else {
        None
    };

    Ok((
        predictions,
        PipelineReport {
            stage_seconds,
            counts,
            confidence_histogram: histogram,
            eval,
        },
    ))
}

fn read_answer(inputs: &PipelineInputs, translated: &MRCExample) -> Result<String> {
    let pair = encode_segments(
        &[&translated.question],
        &translated.passage,
        inputs.source_vocab,
        inputs.encoder.max_len,
    )?;
    let mut tape = Tape::new();
    let bound = inputs.reader.bind(&mut tape);
    let (start, end) = single_forward(&mut tape, &bound, inputs.encoder, &pair, None)?;
    let prediction = decode_span(
        tape.value(start),
        tape.value(end),
        &pair,
        inputs.max_answer_len,
        "backtranslation",
    )?;
    Ok(prediction.text)
}
