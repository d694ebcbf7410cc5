//! Dataset types, SQuAD-format ingestion, the pluggable translator, and
//! the synthetic bilingual task generator.

mod squad;
mod synthetic;
mod translate;

pub use squad::{
    dataset_stats, load_predictions, load_squad_json, save_predictions, save_squad_json,
    DatasetStats, LengthStats, SquadLoad,
};
pub use synthetic::{generate_synthetic_bilingual, SyntheticConfig, SyntheticDataset};
pub use translate::{
    make_bilingual, round_trip_answer, translate_example, translate_text, AlignmentInfo,
    TranslatedExample, TranslatorKind, TranslatorSpec, UnknownPolicy,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One answer with its char offset into the passage.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Answer {
    pub text: String,
    pub char_start: usize,
}

/// One ⟨passage, question, answers⟩ record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MRCExample {
    pub id: String,
    pub passage: String,
    pub question: String,
    pub answers: Vec<Answer>,
    pub language_tag: String,
}

impl MRCExample {
    /// Check the substring invariant: every answer text must equal
    /// `passage[char_start .. char_start + len]` in scalar code points.
    pub fn validate(&self) -> Result<()> {
        if self.answers.is_empty() {
            return Err(Error::Validation {
                qa_id: self.id.clone(),
                reason: "no answers".into(),
            });
        }
        let passage: Vec<char> = self.passage.chars().collect();
        for answer in &self.answers {
            let answer_chars: Vec<char> = answer.text.chars().collect();
            if answer_chars.is_empty() {
                return Err(Error::Validation {
                    qa_id: self.id.clone(),
                    reason: "empty answer text".into(),
                });
            }
            let end = answer.char_start + answer_chars.len();
            if end > passage.len() || passage[answer.char_start..end] != answer_chars[..] {
                return Err(Error::Validation {
                    qa_id: self.id.clone(),
                    reason: format!(
                        "answer {:?} does not match passage at char {}",
                        answer.text, answer.char_start
                    ),
                });
            }
        }
        Ok(())
    }

    /// First answer, the supervision target.
    pub fn primary_answer(&self) -> Option<&Answer> {
        self.answers.first()
    }
}

/// A target-language example paired with its source-language image.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BilingualExample {
    pub target: MRCExample,
    pub source: MRCExample,
    /// Whether a trustworthy ground-truth source span exists. When false
    /// the auxiliary loss weight is forced to zero downstream.
    pub source_span_valid: bool,
}

/// Line-delimited JSON of `BilingualExample` records.
pub fn save_bilingual_jsonl(examples: &[BilingualExample], path: &std::path::Path) -> Result<()> {
    let mut body = String::new();
    for example in examples {
        body.push_str(&serde_json::to_string(example).expect("bilingual serialization"));
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_bilingual_jsonl(path: &std::path::Path) -> Result<Vec<BilingualExample>> {
    let body = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut out = Vec::new();
    for (lineno, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let example: BilingualExample =
            serde_json::from_str(line).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                location: format!("line {}", lineno + 1),
                message: e.to_string(),
            })?;
        example.target.validate()?;
        if example.source_span_valid {
            example.source.validate()?;
        }
        out.push(example);
    }
    Ok(out)
}
