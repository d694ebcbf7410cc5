//! SQuAD v1.1 JSON ingestion, dataset statistics, and prediction files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Answer, MRCExample};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct SquadFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    version: Option<String>,
    data: Vec<SquadArticle>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadArticle {
    #[serde(default)]
    title: String,
    paragraphs: Vec<SquadParagraph>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadParagraph {
    context: String,
    qas: Vec<SquadQa>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadQa {
    id: String,
    question: String,
    answers: Vec<SquadAnswer>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SquadAnswer {
    text: String,
    answer_start: i64,
}

/// Loaded examples plus the ids whose answer offsets had to be repaired
/// by searching for the first occurrence of the answer text.
#[derive(Debug)]
pub struct SquadLoad {
    pub examples: Vec<MRCExample>,
    pub repaired_ids: Vec<String>,
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Char offset of the first occurrence of `needle` in `haystack`.
fn char_find(haystack: &str, needle: &str) -> Option<usize> {
    let byte_idx = haystack.find(needle)?;
    Some(haystack[..byte_idx].chars().count())
}

fn char_slice_matches(passage: &str, start: usize, text: &str) -> bool {
    let window: String = passage
        .chars()
        .skip(start)
        .take(text.chars().count())
        .collect();
    window == text
}

/// Load a SQuAD v1.1 file into flat examples, one per qa entry. Answer
/// offsets are validated against the context; bad offsets are repaired by
/// searching the answer text, and unrepairable ones fail the load.
pub fn load_squad_json(path: &Path) -> Result<SquadLoad> {
    let body = read_file(path)?;
    let mut de = serde_json::Deserializer::from_str(&body);
    let file: SquadFile =
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            location: e.path().to_string(),
            message: e.inner().to_string(),
        })?;

    let mut examples = Vec::new();
    let mut repaired_ids = Vec::new();
    for article in &file.data {
        for paragraph in &article.paragraphs {
            for qa in &paragraph.qas {
                if qa.answers.is_empty() {
                    return Err(Error::Validation {
                        qa_id: qa.id.clone(),
                        reason: "qa entry has no answers".into(),
                    });
                }
                let mut answers = Vec::with_capacity(qa.answers.len());
                let mut repaired = false;
                for answer in &qa.answers {
                    if answer.text.is_empty() {
                        return Err(Error::Validation {
                            qa_id: qa.id.clone(),
                            reason: "empty answer text".into(),
                        });
                    }
                    let start = usize::try_from(answer.answer_start).ok();
                    let valid = start
                        .map(|s| char_slice_matches(&paragraph.context, s, &answer.text))
                        .unwrap_or(false);
                    let char_start = if valid {
                        start.unwrap()
                    } else {
                        match char_find(&paragraph.context, &answer.text) {
                            Some(found) => {
                                repaired = true;
                                found
                            }
                            None => {
                                return Err(Error::Validation {
                                    qa_id: qa.id.clone(),
                                    reason: format!(
                                        "answer {:?} not found in context",
                                        answer.text
                                    ),
                                })
                            }
                        }
                    };
                    answers.push(Answer {
                        text: answer.text.clone(),
                        char_start,
                    });
                }
                if repaired {
                    log::warn!("repaired answer offsets for qa {}", qa.id);
                    repaired_ids.push(qa.id.clone());
                }
                examples.push(MRCExample {
                    id: qa.id.clone(),
                    passage: paragraph.context.clone(),
                    question: qa.question.clone(),
                    answers,
                    language_tag: String::new(),
                });
            }
        }
    }
    Ok(SquadLoad {
        examples,
        repaired_ids,
    })
}

/// Write examples back out in SQuAD v1.1 shape, one paragraph per example.
pub fn save_squad_json(examples: &[MRCExample], path: &Path) -> Result<()> {
    let paragraphs: Vec<SquadParagraph> = examples
        .iter()
        .map(|e| SquadParagraph {
            context: e.passage.clone(),
            qas: vec![SquadQa {
                id: e.id.clone(),
                question: e.question.clone(),
                answers: e
                    .answers
                    .iter()
                    .map(|a| SquadAnswer {
                        text: a.text.clone(),
                        answer_start: a.char_start as i64,
                    })
                    .collect(),
            }],
        })
        .collect();
    let file = SquadFile {
        version: Some("1.1".into()),
        data: vec![SquadArticle {
            title: String::new(),
            paragraphs,
        }],
    };
    let body = serde_json::to_string_pretty(&file).expect("squad serialization");
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Prediction file: one JSON object mapping qa id to answer text.
pub fn load_predictions(path: &Path) -> Result<BTreeMap<String, String>> {
    let body = read_file(path)?;
    serde_json::from_str(&body).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: format!("line {} column {}", e.line(), e.column()),
        message: e.to_string(),
    })
}

pub fn save_predictions(predictions: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(predictions).expect("prediction serialization");
    fs::write(path, body).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Char-length distribution summary: nearest-rank percentiles.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub p50: usize,
    pub p90: usize,
    pub p99: usize,
}

impl LengthStats {
    fn from_lengths(mut lengths: Vec<usize>) -> Self {
        lengths.sort_unstable();
        let n = lengths.len();
        let mean = lengths.iter().sum::<usize>() as f64 / n as f64;
        let rank = |p: f64| -> usize {
            let idx = (p / 100.0 * n as f64).ceil() as usize;
            lengths[idx.clamp(1, n) - 1]
        };
        LengthStats {
            mean,
            p50: rank(50.0),
            p90: rank(90.0),
            p99: rank(99.0),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetStats {
    pub question_count: usize,
    pub total_answers: usize,
    pub answers_per_question: f64,
    pub passage_chars: LengthStats,
    pub question_chars: LengthStats,
    pub answer_chars: LengthStats,
}

pub fn dataset_stats(examples: &[MRCExample]) -> Result<DatasetStats> {
    if examples.is_empty() {
        return Err(Error::Config("dataset_stats over an empty dataset".into()));
    }
    let total_answers: usize = examples.iter().map(|e| e.answers.len()).sum();
    Ok(DatasetStats {
        question_count: examples.len(),
        total_answers,
        answers_per_question: total_answers as f64 / examples.len() as f64,
        passage_chars: LengthStats::from_lengths(
            examples.iter().map(|e| e.passage.chars().count()).collect(),
        ),
        question_chars: LengthStats::from_lengths(
            examples
                .iter()
                .map(|e| e.question.chars().count())
                .collect(),
        ),
        answer_chars: LengthStats::from_lengths(
            examples
                .iter()
                .flat_map(|e| e.answers.iter().map(|a| a.text.chars().count()))
                .collect(),
        ),
    })
}
