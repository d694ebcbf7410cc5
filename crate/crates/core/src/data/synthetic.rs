//! Synthetic bilingual span-extraction tasks.
//!
//! A target passage is a random token sequence with one answer segment
//! delimited by a cue token on both sides; the question names the cue.
//! The source example is the dictionary image of the target. With
//! probability `ambiguity_rate` the target cues are overwritten with
//! random filler tokens while the source keeps them, so the answer
//! position stays recoverable only through the source language.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Answer, BilingualExample, MRCExample};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub num_examples: usize,
    /// Distinct filler tokens in each language.
    pub filler_vocab: usize,
    /// Distinct cue tokens in each language.
    pub cue_vocab: usize,
    /// Inclusive passage length range in tokens (cues included).
    pub passage_len_range: (usize, usize),
    /// Inclusive answer length range in tokens.
    pub answer_len_range: (usize, usize),
    /// Fraction of examples whose target cues are corrupted.
    pub ambiguity_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_examples: 1000,
            filler_vocab: 48,
            cue_vocab: 8,
            passage_len_range: (8, 16),
            answer_len_range: (1, 3),
            ambiguity_rate: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let (plo, phi) = self.passage_len_range;
        let (alo, ahi) = self.answer_len_range;
        if plo == 0 || plo > phi {
            return Err(Error::Config(format!(
                "empty passage length range {plo}..={phi}"
            )));
        }
        if alo == 0 || alo > ahi {
            return Err(Error::Config(format!(
                "empty answer length range {alo}..={ahi}"
            )));
        }
        if ahi + 2 > plo {
            return Err(Error::Config(format!(
                "answers up to {ahi} tokens plus two cues cannot fit a passage of {plo}"
            )));
        }
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return Err(Error::Config(format!(
                "ambiguity_rate {} outside [0, 1]",
                self.ambiguity_rate
            )));
        }
        if self.filler_vocab < 2 || self.cue_vocab < 1 {
            return Err(Error::Config(
                "need at least two fillers and one cue token".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub examples: Vec<BilingualExample>,
    /// `(source_token, target_token)` rows in dictionary TSV order.
    pub dictionary: Vec<(String, String)>,
}

impl SyntheticDataset {
    pub fn target_examples(&self) -> Vec<MRCExample> {
        self.examples.iter().map(|b| b.target.clone()).collect()
    }

    pub fn source_examples(&self) -> Vec<MRCExample> {
        self.examples.iter().map(|b| b.source.clone()).collect()
    }
}

const QUESTION_WORD_TARGET: &str = "ask";
const QUESTION_WORD_SOURCE: &str = "qry";

fn target_filler(i: usize) -> String {
    format!("t{i}")
}
fn source_filler(i: usize) -> String {
    format!("s{i}")
}
fn target_cue(i: usize) -> String {
    format!("c{i}")
}
fn source_cue(i: usize) -> String {
    format!("d{i}")
}

/// Token index -> source image, mirroring the generated dictionary.
fn to_source_token(token: &str) -> String {
    if token == QUESTION_WORD_TARGET {
        QUESTION_WORD_SOURCE.to_string()
    } else if let Some(rest) = token.strip_prefix('t') {
        format!("s{rest}")
    } else if let Some(rest) = token.strip_prefix('c') {
        format!("d{rest}")
    } else {
        token.to_string()
    }
}

fn join_with_offsets(tokens: &[String]) -> (String, Vec<usize>) {
    let mut text = String::new();
    let mut starts = Vec::with_capacity(tokens.len());
    let mut cursor = 0;
    for (i, t) in tokens.iter().enumerate() {
        if i > 0 {
            text.push(' ');
            cursor += 1;
        }
        starts.push(cursor);
        text.push_str(t);
        cursor += t.chars().count();
    }
    (text, starts)
}

fn example_from_tokens(
    id: &str,
    tokens: &[String],
    question: &[String],
    answer_start_tok: usize,
    answer_len: usize,
    language_tag: &str,
) -> MRCExample {
    let (passage, starts) = join_with_offsets(tokens);
    let answer_tokens = &tokens[answer_start_tok..answer_start_tok + answer_len];
    let answer_text = answer_tokens.join(" ");
    MRCExample {
        id: id.to_string(),
        passage,
        question: question.join(" "),
        answers: vec![Answer {
            text: answer_text,
            char_start: starts[answer_start_tok],
        }],
        language_tag: language_tag.to_string(),
    }
}

pub fn generate_synthetic_bilingual(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (plo, phi) = config.passage_len_range;
    let (alo, ahi) = config.answer_len_range;

    let mut examples = Vec::with_capacity(config.num_examples);
    for i in 0..config.num_examples {
        let passage_len = rng.random_range(plo..=phi);
        let answer_len = rng.random_range(alo..=ahi);
        let answer_start = rng.random_range(1..=passage_len - answer_len - 1);
        let cue = rng.random_range(0..config.cue_vocab);

        let mut target_tokens: Vec<String> = (0..passage_len)
            .map(|_| target_filler(rng.random_range(0..config.filler_vocab)))
            .collect();
        target_tokens[answer_start - 1] = target_cue(cue);
        target_tokens[answer_start + answer_len] = target_cue(cue);

        let source_tokens: Vec<String> =
            target_tokens.iter().map(|t| to_source_token(t)).collect();

        if rng.random::<f64>() < config.ambiguity_rate {
            target_tokens[answer_start - 1] =
                target_filler(rng.random_range(0..config.filler_vocab));
            target_tokens[answer_start + answer_len] =
                target_filler(rng.random_range(0..config.filler_vocab));
        }

        let question_t = vec![QUESTION_WORD_TARGET.to_string(), target_cue(cue)];
        let question_s = vec![QUESTION_WORD_SOURCE.to_string(), source_cue(cue)];
        let id = format!("syn-{i:05}");

        let target = example_from_tokens(
            &id,
            &target_tokens,
            &question_t,
            answer_start,
            answer_len,
            "target-syn",
        );
        let source = example_from_tokens(
            &id,
            &source_tokens,
            &question_s,
            answer_start,
            answer_len,
            "source-syn",
        );
        target.validate()?;
        source.validate()?;
        examples.push(BilingualExample {
            target,
            source,
            source_span_valid: true,
        });
    }

    let mut dictionary = Vec::new();
    dictionary.push((
        QUESTION_WORD_SOURCE.to_string(),
        QUESTION_WORD_TARGET.to_string(),
    ));
    for i in 0..config.filler_vocab {
        dictionary.push((source_filler(i), target_filler(i)));
    }
    for i in 0..config.cue_vocab {
        dictionary.push((source_cue(i), target_cue(i)));
    }

    Ok(SyntheticDataset {
        examples,
        dictionary,
    })
}
