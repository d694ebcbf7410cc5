//! Unsupervised alignment of a translated answer onto an exact passage
//! substring: sliding windows of length `len(answer) +/- delta` scored by
//! bag-of-characters F1.

use std::collections::BTreeMap;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::MRCExample;
use crate::error::{Error, Result};

/// Matches scoring below this are reported as low confidence.
pub const LOW_CONFIDENCE_F1: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// Half-open char interval into the passage.
    pub char_start: usize,
    pub char_end: usize,
    pub f1: f64,
    pub window_len: usize,
}

impl MatchResult {
    pub fn low_confidence(&self) -> bool {
        self.f1 < LOW_CONFIDENCE_F1
    }
}

/// Bag-of-characters F1: order-insensitive multiset overlap.
/// Zero when either side is empty or nothing overlaps.
pub fn char_f1(a: &str, b: &str) -> f64 {
    let a_chars: Vec<char> = a.chars().collect();
    let b_chars: Vec<char> = b.chars().collect();
    if a_chars.is_empty() || b_chars.is_empty() {
        return 0.0;
    }
    let mut counts: HashMap<char, i64> = HashMap::new();
    for &c in &a_chars {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut intersection = 0i64;
    for &c in &b_chars {
        if let Some(n) = counts.get_mut(&c) {
            if *n > 0 {
                *n -= 1;
                intersection += 1;
            }
        }
    }
    if intersection == 0 {
        return 0.0;
    }
    // 2PR/(P+R) with P = i/|a|, R = i/|b| collapses to 2i/(|a|+|b|).
    2.0 * intersection as f64 / (a_chars.len() + b_chars.len()) as f64
}

/// Best-F1 window over every start position and every window length in
/// `[max(1, len-delta), len+delta]`. Ties prefer the earlier start, then
/// the shorter window. The result is always an exact passage substring.
pub fn simple_match(passage: &str, translated_answer: &str, delta: usize) -> Result<MatchResult> {
    let passage_chars: Vec<char> = passage.chars().collect();
    let answer_chars: Vec<char> = translated_answer.chars().collect();
    if passage_chars.is_empty() || answer_chars.is_empty() {
        return Err(Error::Config(
            "simple_match needs a nonempty passage and answer".into(),
        ));
    }
    let n = passage_chars.len();
    let la = answer_chars.len();
    // Window lengths clamp to the passage: an answer longer than the
    // whole passage degenerates to matching the passage itself.
    let hi = (la + delta).min(n);
    let lo = la.saturating_sub(delta).max(1).min(hi);

    let mut answer_counts: HashMap<char, i64> = HashMap::new();
    for &c in &answer_chars {
        *answer_counts.entry(c).or_insert(0) += 1;
    }

    let mut best: Option<MatchResult> = None;
    for win in lo..=hi {
        // Sliding counts: `have[c]` is the window count; intersection is
        // the number of window chars still covered by the answer bag.
        let mut have: HashMap<char, i64> = HashMap::new();
        let mut intersection = 0i64;
        for (i, &c) in passage_chars.iter().enumerate() {
            let entry = have.entry(c).or_insert(0);
            *entry += 1;
            if *entry <= answer_counts.get(&c).copied().unwrap_or(0) {
                intersection += 1;
            }
            if i + 1 >= win {
                let start = i + 1 - win;
                let f1 = if intersection == 0 {
                    0.0
                } else {
                    2.0 * intersection as f64 / (win + la) as f64
                };
                let candidate = MatchResult {
                    char_start: start,
                    char_end: start + win,
                    f1,
                    window_len: win,
                };
                let replace = match &best {
                    None => true,
                    Some(b) => {
                        f1 > b.f1
                            || (f1 == b.f1
                                && (start < b.char_start
                                    || (start == b.char_start && win < b.window_len)))
                    }
                };
                if replace {
                    best = Some(candidate);
                }
                // Retire the leftmost char of the window.
                let left = passage_chars[start];
                let entry = have.get_mut(&left).expect("window char present");
                if *entry <= answer_counts.get(&left).copied().unwrap_or(0) {
                    intersection -= 1;
                }
                *entry -= 1;
            }
        }
    }
    Ok(best.expect("at least one window evaluated"))
}

/// Extract the matched substring from the passage.
pub fn matched_text(passage: &str, result: &MatchResult) -> String {
    passage
        .chars()
        .skip(result.char_start)
        .take(result.char_end - result.char_start)
        .collect()
}

/// Batch alignment: map every prediction onto an exact substring of its
/// example's passage. Returns the aligned predictions plus per-id match
/// F1 for confidence reporting. Empty predictions stay empty.
pub fn align_predictions(
    predictions: &BTreeMap<String, String>,
    examples: &[MRCExample],
    delta: usize,
) -> Result<(BTreeMap<String, String>, BTreeMap<String, f64>)> {
    let mut aligned = BTreeMap::new();
    let mut confidences = BTreeMap::new();
    for example in examples {
        let Some(prediction) = predictions.get(&example.id) else {
            continue;
        };
        if prediction.is_empty() {
            aligned.insert(example.id.clone(), String::new());
            confidences.insert(example.id.clone(), 0.0);
            continue;
        }
        let m = simple_match(&example.passage, prediction, delta)?;
        aligned.insert(example.id.clone(), matched_text(&example.passage, &m));
        confidences.insert(example.id.clone(), m.f1);
    }
    Ok((aligned, confidences))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_strings_score_one() {
        assert_eq!(char_f1("北京大学", "北京大学"), 1.0);
        assert_eq!(char_f1("abc", "abc"), 1.0);
    }

    #[test]
    fn disjoint_strings_score_zero() {
        assert_eq!(char_f1("abc", "xyz"), 0.0);
        assert_eq!(char_f1("", "xyz"), 0.0);
        assert_eq!(char_f1("abc", ""), 0.0);
    }

    #[test]
    fn partial_overlap_derived_value() {
        // a has 4 chars, b has 2, both of b's covered: P=0.5, R=1, F1=2/3.
        let f1 = char_f1("北京大学", "北京");
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn multiset_semantics_counts_duplicates() {
        // "aa" vs "a": intersection 1, F1 = 2/(2+1).
        let f1 = char_f1("aa", "a");
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn verbatim_answer_found_exactly() {
        let m = simple_match("清华大学位于北京市", "位于", 0).unwrap();
        assert_eq!((m.char_start, m.char_end), (4, 6));
        assert_eq!(m.f1, 1.0);
        assert_eq!(matched_text("清华大学位于北京市", &m), "位于");
    }

    #[test]
    fn delta_zero_fixes_window_length() {
        let m = simple_match("abcdef", "xyz", 0).unwrap();
        assert_eq!(m.window_len, 3);
        assert_eq!(m.f1, 0.0);
        assert!(m.low_confidence());
        // Zero-overlap ties resolve to the earliest, shortest window.
        assert_eq!(m.char_start, 0);
    }

    #[test]
    fn earlier_start_wins_ties() {
        // "ab" appears twice; the first occurrence must win.
        let m = simple_match("ab__ab", "ab", 1).unwrap();
        assert_eq!(m.char_start, 0);
        assert_eq!(m.f1, 1.0);
    }

    #[test]
    fn monotone_in_delta() {
        let passage = "the quick brown fox jumps";
        let answer = "quick brwn";
        let mut prev = 0.0;
        for delta in 0..=5 {
            let m = simple_match(passage, answer, delta).unwrap();
            assert!(m.f1 >= prev - 1e-15, "delta {delta} regressed");
            prev = m.f1;
        }
    }

    #[test]
    fn empty_inputs_are_rejected() {
        assert!(simple_match("", "a", 0).is_err());
        assert!(simple_match("a", "", 0).is_err());
    }
}
