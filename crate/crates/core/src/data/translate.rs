//! Token-level mock translator standing in for an external NMT system.
//!
//! Translation is deterministic given a seed; `noise_rate` substitutes
//! random dictionary tokens to simulate translation loss. Alignment spans
//! are recorded before noise is applied, so noise can corrupt them the
//! way a real translation error would.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Answer, BilingualExample, MRCExample};
use crate::error::{Error, Result};
use crate::simplematch;
use crate::text::{tokenize_with_offsets, TokenizeMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TranslatorKind {
    Dictionary,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnknownPolicy {
    /// Copy tokens missing from the dictionary through unchanged.
    Keep,
    /// Replace them with the literal `[UNK]` token.
    Unk,
}

#[derive(Clone, Debug)]
pub struct TranslatorSpec {
    pub kind: TranslatorKind,
    pub mapping: HashMap<String, String>,
    pub unknown_policy: UnknownPolicy,
    pub noise_rate: f64,
    pub token_mode: TokenizeMode,
    /// Sorted substitution pool for noise, derived from the mapping values.
    noise_pool: Vec<String>,
}

impl TranslatorSpec {
    pub fn identity(token_mode: TokenizeMode) -> Self {
        TranslatorSpec {
            kind: TranslatorKind::Identity,
            mapping: HashMap::new(),
            unknown_policy: UnknownPolicy::Keep,
            noise_rate: 0.0,
            token_mode,
            noise_pool: Vec::new(),
        }
    }

    pub fn dictionary(
        mapping: HashMap<String, String>,
        token_mode: TokenizeMode,
    ) -> Result<Self> {
        if mapping.is_empty() {
            return Err(Error::Config("dictionary translator needs a nonempty mapping".into()));
        }
        let mut noise_pool: Vec<String> = mapping.values().cloned().collect();
        noise_pool.sort();
        noise_pool.dedup();
        Ok(TranslatorSpec {
            kind: TranslatorKind::Dictionary,
            mapping,
            unknown_policy: UnknownPolicy::Keep,
            noise_rate: 0.0,
            token_mode,
            noise_pool,
        })
    }

    /// Read a two-column `source_token<TAB>target_token` TSV. The returned
    /// spec translates source-language tokens into target-language tokens;
    /// call `inverted()` for the other direction.
    pub fn from_tsv(path: &Path, token_mode: TokenizeMode) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut mapping = HashMap::new();
        for (lineno, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let mut parts = line.splitn(2, '\t');
            let (src, tgt) = match (parts.next(), parts.next()) {
                (Some(s), Some(t)) if !s.is_empty() && !t.is_empty() => (s, t),
                _ => {
                    return Err(Error::Parse {
                        path: path.to_path_buf(),
                        location: format!("line {}", lineno + 1),
                        message: "expected source_token<TAB>target_token".into(),
                    })
                }
            };
            mapping.entry(src.to_string()).or_insert_with(|| tgt.to_string());
        }
        Self::dictionary(mapping, token_mode)
    }

    /// Swap translation direction. Duplicate values keep the
    /// lexicographically first key, deterministically.
    pub fn inverted(&self) -> Result<Self> {
        let mut pairs: Vec<(&String, &String)> = self.mapping.iter().collect();
        pairs.sort();
        let mut mapping = HashMap::new();
        for (k, v) in pairs {
            mapping.entry(v.clone()).or_insert_with(|| k.clone());
        }
        let mut spec = Self::dictionary(mapping, self.token_mode)?;
        spec.unknown_policy = self.unknown_policy;
        spec.noise_rate = self.noise_rate;
        Ok(spec)
    }

    pub fn with_noise(mut self, noise_rate: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&noise_rate) {
            return Err(Error::Config(format!("noise_rate {noise_rate} outside [0, 1]")));
        }
        self.noise_rate = noise_rate;
        Ok(self)
    }

    pub fn with_unknown_policy(mut self, policy: UnknownPolicy) -> Self {
        self.unknown_policy = policy;
        self
    }

    /// Tokenization mode of the text this spec translates *from*.
    pub fn with_token_mode(mut self, mode: TokenizeMode) -> Self {
        self.token_mode = mode;
        self
    }

    fn translate_token(&self, token: &str) -> String {
        match self.kind {
            TranslatorKind::Identity => token.to_string(),
            TranslatorKind::Dictionary => match self.mapping.get(token) {
                Some(t) => t.clone(),
                None => match self.unknown_policy {
                    UnknownPolicy::Keep => token.to_string(),
                    UnknownPolicy::Unk => "[UNK]".to_string(),
                },
            },
        }
    }

    fn join(&self, tokens: &[String]) -> String {
        match self.token_mode {
            TokenizeMode::Char => tokens.concat(),
            TokenizeMode::Whitespace => tokens.join(" "),
        }
    }
}

/// Where the translated answer landed in the translated passage.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AlignmentInfo {
    pub char_start: usize,
    pub char_len: usize,
    /// False when noise corrupted the recorded span.
    pub reliable: bool,
}

#[derive(Clone, Debug)]
pub struct TranslatedExample {
    pub example: MRCExample,
    /// Span of the primary answer in the translated passage.
    pub alignment: Option<AlignmentInfo>,
    /// Noise-free translation of the primary answer.
    pub translated_answer: Option<String>,
}

struct TranslatedText {
    tokens: Vec<String>,
    /// (char_start, char_len) per token in the joined pre-noise text.
    offsets: Vec<(usize, usize)>,
}

fn translate_tokens(
    tokens: &[String],
    spec: &TranslatorSpec,
    rng: &mut ChaCha8Rng,
) -> TranslatedText {
    let mut translated: Vec<String> = tokens.iter().map(|t| spec.translate_token(t)).collect();
    let mut offsets = Vec::with_capacity(translated.len());
    let sep = match spec.token_mode {
        TokenizeMode::Char => 0,
        TokenizeMode::Whitespace => 1,
    };
    let mut cursor = 0;
    for t in &translated {
        let len = t.chars().count();
        offsets.push((cursor, len));
        cursor += len + sep;
    }
    if spec.noise_rate > 0.0 && !spec.noise_pool.is_empty() {
        for t in translated.iter_mut() {
            if rng.random::<f64>() < spec.noise_rate {
                let mut pick = rng.random_range(0..spec.noise_pool.len());
                if spec.noise_pool[pick] == *t && spec.noise_pool.len() > 1 {
                    pick = (pick + 1) % spec.noise_pool.len();
                }
                *t = spec.noise_pool[pick].clone();
            }
        }
    }
    TranslatedText {
        tokens: translated,
        offsets,
    }
}

/// Translate one example token-by-token. The primary answer's span in the
/// translated passage is recorded before noise, so noise can corrupt it.
pub fn translate_example(
    example: &MRCExample,
    spec: &TranslatorSpec,
    seed: u64,
) -> Result<TranslatedExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let passage_tokens = tokenize_with_offsets(&example.passage, spec.token_mode);
    let question_tokens = tokenize_with_offsets(&example.question, spec.token_mode);
    if passage_tokens.is_empty() || question_tokens.is_empty() {
        return Err(Error::DegenerateTranslation(format!(
            "example {} tokenized to nothing",
            example.id
        )));
    }

    let token_strings: Vec<String> = passage_tokens.iter().map(|(t, _, _)| t.clone()).collect();
    let passage = translate_tokens(&token_strings, spec, &mut rng);
    let question_strings: Vec<String> =
        question_tokens.iter().map(|(t, _, _)| t.clone()).collect();
    let question = translate_tokens(&question_strings, spec, &mut rng);

    let new_passage = spec.join(&passage.tokens);
    let new_question = spec.join(&question.tokens);
    if new_passage.is_empty() || new_question.is_empty() {
        return Err(Error::DegenerateTranslation(format!(
            "example {} translated to an empty text",
            example.id
        )));
    }

    // Primary-answer alignment: which passage tokens the answer covers.
    let mut alignment = None;
    let mut translated_answer = None;
    let mut answers = Vec::new();
    if let Some(answer) = example.primary_answer() {
        let a_start = answer.char_start;
        let a_end = a_start + answer.text.chars().count();
        let covered: Vec<usize> = passage_tokens
            .iter()
            .enumerate()
            .filter(|(_, (_, s, l))| *s < a_end && s + l > a_start)
            .map(|(i, _)| i)
            .collect();
        if let (Some(&first), Some(&last)) = (covered.first(), covered.last()) {
            // Pre-noise translation of the covered tokens.
            let pre_noise: Vec<String> = token_strings[first..=last]
                .iter()
                .map(|t| spec.translate_token(t))
                .collect();
            let answer_text = spec.join(&pre_noise);
            let (span_start, _) = passage.offsets[first];
            let (last_start, last_len) = passage.offsets[last];
            let span_len = last_start + last_len - span_start;

            // What actually sits at the recorded span after noise.
            let surface: String = new_passage
                .chars()
                .skip(span_start)
                .take(span_len)
                .collect();
            let reliable = surface == answer_text;
            let (text, char_start) = if surface.chars().count() == span_len {
                (surface, span_start)
            } else {
                // Span ran past the end of the noised passage; fall back to
                // the first char so the example stays well-formed.
                (new_passage.chars().take(1).collect(), 0)
            };
            answers.push(Answer { text, char_start });
            alignment = Some(AlignmentInfo {
                char_start: span_start,
                char_len: span_len,
                reliable,
            });
            translated_answer = Some(answer_text);
        }
    }

    Ok(TranslatedExample {
        example: MRCExample {
            id: example.id.clone(),
            passage: new_passage,
            question: new_question,
            answers,
            language_tag: format!("{}:mt", example.language_tag),
        },
        alignment,
        translated_answer,
    })
}

/// Pair a target example with its translated source image. The source
/// gold span comes from alignment metadata when it survived translation
/// and otherwise from a SimpleMatch search; a low-confidence match flips
/// `source_span_valid` off.
pub fn make_bilingual(
    example: &MRCExample,
    forward: &TranslatorSpec,
    seed: u64,
    delta: usize,
) -> Result<BilingualExample> {
    let translated = translate_example(example, forward, seed)?;
    let mut source = translated.example;
    let mut valid = translated
        .alignment
        .as_ref()
        .map(|a| a.reliable)
        .unwrap_or(false);
    if !valid {
        if let Some(answer_text) = &translated.translated_answer {
            let m = simplematch::simple_match(&source.passage, answer_text, delta)?;
            let text: String = source
                .passage
                .chars()
                .skip(m.char_start)
                .take(m.char_end - m.char_start)
                .collect();
            source.answers = vec![Answer {
                text,
                char_start: m.char_start,
            }];
            valid = !m.low_confidence();
        }
    }
    Ok(BilingualExample {
        target: example.clone(),
        source,
        source_span_valid: valid,
    })
}

/// Translate a bare text token-by-token (noise included), e.g. the
/// back-translation of a predicted answer.
pub fn translate_text(text: &str, spec: &TranslatorSpec, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = tokenize_with_offsets(text, spec.token_mode)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect();
    if tokens.is_empty() {
        return Err(Error::DegenerateTranslation(format!(
            "text {text:?} tokenized to nothing"
        )));
    }
    let translated = translate_tokens(&tokens, spec, &mut rng);
    Ok(spec.join(&translated.tokens))
}

/// Corrupted copy of an answer via a noisy round trip through both
/// translation directions (used to synthesize aligner/verifier inputs).
pub fn round_trip_answer(
    answer: &str,
    forward: &TranslatorSpec,
    backward: &TranslatorSpec,
    seed: u64,
) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tokens: Vec<String> = tokenize_with_offsets(answer, forward.token_mode)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect();
    if tokens.is_empty() {
        return Err(Error::DegenerateTranslation("empty answer".into()));
    }
    let there = translate_tokens(&tokens, forward, &mut rng);
    let back = translate_tokens(&there.tokens, backward, &mut rng);
    Ok(backward.join(&back.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(passage: &str, question: &str, answer: &str, start: usize) -> MRCExample {
        MRCExample {
            id: "t1".into(),
            passage: passage.into(),
            question: question.into(),
            answers: vec![Answer {
                text: answer.into(),
                char_start: start,
            }],
            language_tag: "tgt".into(),
        }
    }

    fn dict() -> TranslatorSpec {
        let mapping: HashMap<String, String> = [("aa", "xx"), ("bb", "yy"), ("cc", "zz")]
            .into_iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect();
        TranslatorSpec::dictionary(mapping, TokenizeMode::Whitespace).unwrap()
    }

    #[test]
    fn identity_spec_is_identity_and_idempotent() {
        let e = example("aa bb cc", "bb", "bb", 3);
        let spec = TranslatorSpec::identity(TokenizeMode::Whitespace);
        let once = translate_example(&e, &spec, 7).unwrap();
        assert_eq!(once.example.passage, e.passage);
        assert_eq!(once.example.question, e.question);
        assert_eq!(once.example.answers[0].text, "bb");
        let twice = translate_example(&once.example, &spec, 7).unwrap();
        assert_eq!(twice.example.passage, once.example.passage);
        assert_eq!(twice.example.answers, once.example.answers);
    }

    #[test]
    fn zero_noise_dictionary_maps_every_token() {
        let e = example("aa bb cc", "bb", "bb cc", 3);
        let t = translate_example(&e, &dict(), 0).unwrap();
        assert_eq!(t.example.passage, "xx yy zz");
        assert_eq!(t.example.question, "yy");
        assert_eq!(t.example.answers[0].text, "yy zz");
        assert_eq!(t.example.answers[0].char_start, 3);
        assert!(t.alignment.unwrap().reliable);
        t.example.validate().unwrap();
    }

    #[test]
    fn full_noise_substitutes_every_token_and_flags_span() {
        let words: Vec<String> = (0..10).map(|i| format!("w{i}")).collect();
        let mapping: HashMap<String, String> = words
            .iter()
            .map(|w| (w.clone(), format!("m-{w}")))
            .collect();
        let passage = words.join(" ");
        let e = example(&passage, "w0", "w3", 9);
        let spec = TranslatorSpec::dictionary(mapping.clone(), TokenizeMode::Whitespace)
            .unwrap()
            .with_noise(1.0)
            .unwrap();
        let t = translate_example(&e, &spec, 42).unwrap();
        // Every position must be substituted away from its mapping image.
        let out_tokens: Vec<&str> = t.example.passage.split(' ').collect();
        assert_eq!(out_tokens.len(), 10);
        let substituted = out_tokens
            .iter()
            .zip(&words)
            .filter(|(out, orig)| ***out != mapping[*orig])
            .count();
        assert_eq!(substituted, 10);
        assert!(!t.alignment.unwrap().reliable);
    }

    #[test]
    fn translation_is_deterministic_per_seed() {
        let e = example("aa bb cc aa bb", "aa", "bb", 3);
        let spec = dict().with_noise(0.5).unwrap();
        let a = translate_example(&e, &spec, 9).unwrap();
        let b = translate_example(&e, &spec, 9).unwrap();
        assert_eq!(a.example, b.example);
        let c = translate_example(&e, &spec, 10).unwrap();
        assert!(a.example == c.example || a.example.passage != c.example.passage);
    }

    #[test]
    fn tsv_round_trip_and_inversion() {
        let dir = std::env::temp_dir().join(format!("clmrc-dict-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dict.tsv");
        std::fs::write(&path, "s1\tt1\ns2\tt2\n").unwrap();
        let spec = TranslatorSpec::from_tsv(&path, TokenizeMode::Whitespace).unwrap();
        assert_eq!(spec.translate_token("s1"), "t1");
        let inv = spec.inverted().unwrap();
        assert_eq!(inv.translate_token("t2"), "s2");
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn make_bilingual_marks_valid_spans() {
        let e = example("aa bb cc", "bb", "cc", 6);
        let b = make_bilingual(&e, &dict(), 3, 2).unwrap();
        assert!(b.source_span_valid);
        assert_eq!(b.source.answers[0].text, "zz");
        b.source.validate().unwrap();
        assert_eq!(b.target, e);
    }

    #[test]
    fn unknown_policy_unk_replaces_missing_tokens() {
        let e = example("aa qq", "aa", "aa", 0);
        let spec = dict().with_unknown_policy(UnknownPolicy::Unk);
        let t = translate_example(&e, &spec, 0).unwrap();
        assert_eq!(t.example.passage, "xx [UNK]");
    }
}
