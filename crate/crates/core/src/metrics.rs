//! Exact Match and character-level F1 over multiple references.
//!
//! Normalization, applied identically to predictions and references:
//! strip surrounding whitespace, drop every char that is neither
//! alphanumeric nor whitespace, lowercase. Interior whitespace is kept.
//! F1 reuses the same bag-of-characters overlap as SimpleMatch, so the
//! aligner and the scorer agree on what "overlap" means.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::MRCExample;
use crate::error::{Error, Result};
use crate::simplematch::char_f1;

pub fn normalize(text: &str) -> String {
    text.trim()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Score one prediction against its references: EM is 1 when the
/// normalized prediction equals any normalized reference; F1 is the max
/// bag-of-chars overlap. Both in [0, 1].
pub fn score_example(prediction: &str, references: &[String]) -> Result<(f64, f64)> {
    if references.is_empty() {
        return Err(Error::EmptyReferences("unidentified example".into()));
    }
    let pred = normalize(prediction);
    let mut em = 0.0;
    let mut f1 = 0.0f64;
    for reference in references {
        let r = normalize(reference);
        if pred == r {
            em = 1.0;
        }
        f1 = f1.max(char_f1(&pred, &r));
    }
    Ok((em, f1))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PerExampleScore {
    pub id: String,
    pub em: f64,
    pub f1: f64,
}

/// Corpus scores as percentages plus the per-example breakdown
/// (sorted by id, which also makes the result ordering-invariant).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalResult {
    pub em: f64,
    pub f1: f64,
    pub per_example: Vec<PerExampleScore>,
}

/// Mean EM/F1 over a dataset, times 100. Ids missing from `predictions`
/// score zero with a warning; duplicate example ids are an error.
pub fn evaluate_dataset(
    predictions: &BTreeMap<String, String>,
    examples: &[MRCExample],
) -> Result<EvalResult> {
    if examples.is_empty() {
        return Err(Error::Config("evaluate_dataset over an empty dataset".into()));
    }
    let mut seen = HashSet::new();
    let mut per_example = Vec::with_capacity(examples.len());
    for example in examples {
        if !seen.insert(example.id.clone()) {
            return Err(Error::DuplicateId(example.id.clone()));
        }
        let references: Vec<String> =
            example.answers.iter().map(|a| a.text.clone()).collect();
        if references.is_empty() {
            return Err(Error::EmptyReferences(example.id.clone()));
        }
        let (em, f1) = match predictions.get(&example.id) {
            Some(prediction) => score_example(prediction, &references)?,
            None => {
                log::warn!("no prediction for {}, scoring 0", example.id);
                (0.0, 0.0)
            }
        };
        per_example.push(PerExampleScore {
            id: example.id.clone(),
            em,
            f1,
        });
    }
    per_example.sort_by(|a, b| a.id.cmp(&b.id));
    let n = per_example.len() as f64;
    let em = per_example.iter().map(|p| p.em).sum::<f64>() / n * 100.0;
    let f1 = per_example.iter().map(|p| p.f1).sum::<f64>() / n * 100.0;
    Ok(EvalResult {
        em,
        f1,
        per_example,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Answer;

    fn example(id: &str, passage: &str, answers: &[(&str, usize)]) -> MRCExample {
        MRCExample {
            id: id.into(),
            passage: passage.into(),
            question: "q".into(),
            answers: answers
                .iter()
                .map(|(t, s)| Answer {
                    text: t.to_string(),
                    char_start: *s,
                })
                .collect(),
            language_tag: String::new(),
        }
    }

    #[test]
    fn verbatim_match_scores_one_one() {
        let (em, f1) = score_example("北京", &["北京".to_string()]).unwrap();
        assert_eq!((em, f1), (1.0, 1.0));
    }

    #[test]
    fn max_over_references() {
        let refs = vec!["北京".to_string(), "北京大学".to_string()];
        let (em, f1) = score_example("北京大学", &refs).unwrap();
        assert_eq!(em, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn partial_overlap_derived() {
        let (em, f1) = score_example("北京", &["北京大学".to_string()]).unwrap();
        assert_eq!(em, 0.0);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn em_implies_f1_under_normalization() {
        let (em, f1) = score_example("  The Answer!  ", &["the answer".to_string()]).unwrap();
        assert_eq!(em, 1.0);
        assert_eq!(f1, 1.0);
    }

    #[test]
    fn normalization_drops_punctuation_and_case() {
        assert_eq!(normalize("Hello, World!"), "hello world");
        assert_eq!(normalize("「北京」大学。"), "北京大学");
    }

    #[test]
    fn empty_reference_list_is_an_error() {
        assert!(matches!(
            score_example("x", &[]),
            Err(Error::EmptyReferences(_))
        ));
    }

    #[test]
    fn dataset_all_correct_and_half_correct() {
        let examples = vec![
            example("a", "xy", &[("xy", 0)]),
            example("b", "uv", &[("uv", 0)]),
        ];
        let mut predictions = BTreeMap::new();
        predictions.insert("a".to_string(), "xy".to_string());
        predictions.insert("b".to_string(), "uv".to_string());
        let result = evaluate_dataset(&predictions, &examples).unwrap();
        assert_eq!(result.em, 100.0);
        assert_eq!(result.f1, 100.0);

        predictions.insert("b".to_string(), "##".to_string());
        let result = evaluate_dataset(&predictions, &examples).unwrap();
        assert_eq!(result.em, 50.0);
    }

    #[test]
    fn missing_prediction_scores_zero() {
        let examples = vec![example("only", "zz", &[("zz", 0)])];
        let result = evaluate_dataset(&BTreeMap::new(), &examples).unwrap();
        assert_eq!(result.em, 0.0);
        assert_eq!(result.per_example[0].f1, 0.0);
    }

    #[test]
    fn duplicate_ids_are_a_data_error() {
        let examples = vec![
            example("dup", "zz", &[("zz", 0)]),
            example("dup", "zz", &[("zz", 0)]),
        ];
        assert!(matches!(
            evaluate_dataset(&BTreeMap::new(), &examples),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn ordering_invariance() {
        let mut examples = vec![
            example("a", "xy", &[("xy", 0)]),
            example("b", "uv", &[("uv", 0)]),
            example("c", "pq", &[("pq", 0)]),
        ];
        let mut predictions = BTreeMap::new();
        predictions.insert("a".to_string(), "xy".to_string());
        predictions.insert("c".to_string(), "p".to_string());
        let forward = evaluate_dataset(&predictions, &examples).unwrap();
        examples.reverse();
        let reversed = evaluate_dataset(&predictions, &examples).unwrap();
        assert_eq!(forward.em, reversed.em);
        assert_eq!(forward.f1, reversed.f1);
    }
}
