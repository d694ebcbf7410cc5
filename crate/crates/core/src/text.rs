//! Vocabularies, tokenization, and packing of (question, passage) pairs
//! into model inputs with char<->token offset maps.
//!
//! All character offsets count Unicode scalar values, never bytes, and no
//! normalization is applied anywhere.

use std::collections::HashMap;
use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const CLS_TOKEN: &str = "[CLS]";
pub const SEP_TOKEN: &str = "[SEP]";
const SPECIALS: [&str; 4] = [PAD_TOKEN, UNK_TOKEN, CLS_TOKEN, SEP_TOKEN];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizeMode {
    /// One token per scalar code point; newlines count as gaps.
    Char,
    /// Whitespace-separated words.
    Whitespace,
}

/// Tokens with their (char_start, char_len) spans in the source text.
pub fn tokenize_with_offsets(text: &str, mode: TokenizeMode) -> Vec<(String, usize, usize)> {
    let mut out = Vec::new();
    match mode {
        TokenizeMode::Char => {
            for (i, ch) in text.chars().enumerate() {
                if ch != '\n' && ch != '\r' {
                    out.push((ch.to_string(), i, 1));
                }
            }
        }
        TokenizeMode::Whitespace => {
            let mut current = String::new();
            let mut start = 0;
            let mut chars = 0;
            for (i, ch) in text.chars().enumerate() {
                chars = i + 1;
                if ch.is_whitespace() {
                    if !current.is_empty() {
                        out.push((std::mem::take(&mut current), start, i - start));
                    }
                } else {
                    if current.is_empty() {
                        start = i;
                    }
                    current.push(ch);
                }
            }
            if !current.is_empty() {
                out.push((current, start, chars - start));
            }
        }
    }
    out
}

pub fn tokenize(text: &str, mode: TokenizeMode) -> Vec<String> {
    tokenize_with_offsets(text, mode)
        .into_iter()
        .map(|(t, _, _)| t)
        .collect()
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
    mode: TokenizeMode,
}

impl Vocabulary {
    /// Build from a corpus: the four specials first, then tokens by
    /// descending frequency with lexicographic tie-break, cut to `max_size`.
    pub fn build<S: AsRef<str>>(
        corpus: &[S],
        mode: TokenizeMode,
        max_size: usize,
    ) -> Result<Vocabulary> {
        if max_size < 5 {
            return Err(Error::Config(format!(
                "vocabulary max_size {max_size} cannot fit the specials plus one token"
            )));
        }
        if corpus.is_empty() {
            return Err(Error::Config("empty corpus for vocabulary build".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for token in tokenize(text.as_ref(), mode) {
                *counts.entry(token).or_insert(0) += 1;
            }
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_size - SPECIALS.len());

        let mut id_to_token: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(ranked.into_iter().map(|(t, _)| t));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            mode,
        })
    }

    pub fn mode(&self) -> TokenizeMode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    /// Id of a token, falling back to `[UNK]`.
    pub fn id_of(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(|s| s.as_str())
    }

    pub fn encode_text(&self, text: &str) -> Vec<u32> {
        tokenize(text, self.mode)
            .iter()
            .map(|t| self.id_of(t))
            .collect()
    }

    /// One token per line, line number = id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.id_to_token.join("\n");
        fs::write(path, body).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Load a vocabulary file; the tokenize mode is not stored in the file
    /// and must be supplied by the caller.
    pub fn load(path: &Path, mode: TokenizeMode) -> Result<Vocabulary> {
        let body = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let id_to_token: Vec<String> = body.split('\n').map(|s| s.to_string()).collect();
        for (i, special) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(|s| s.as_str()) != Some(*special) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    location: format!("line {i}"),
                    message: format!("expected special token {special}"),
                });
            }
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocabulary {
            token_to_id,
            id_to_token,
            mode,
        })
    }
}

/// Inclusive token span into an `EncodedPair`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSpan {
    pub start: usize,
    pub end: usize,
}

impl TokenSpan {
    pub fn new(start: usize, end: usize) -> Self {
        debug_assert!(start <= end);
        TokenSpan { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// A packed `[CLS] .. [SEP] passage [SEP]` input with offset maps.
#[derive(Clone, Debug)]
pub struct EncodedPair {
    pub token_ids: Vec<u32>,
    /// 0 before the passage segment, 1 for passage tokens and the final
    /// separator, 0 again on padding.
    pub segment_ids: Vec<u8>,
    /// False on padding positions.
    pub attention_mask: Vec<bool>,
    /// Half-open interval of passage tokens within `token_ids`.
    pub passage_token_range: Range<usize>,
    /// Original passage text, kept for answer-text recovery.
    pub passage: String,
    /// Per original passage char: index of its token before truncation.
    char_to_full_token: Vec<Option<usize>>,
    /// (char_start, char_len) per retained passage token.
    token_to_char: Vec<(usize, usize)>,
}

impl EncodedPair {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Number of non-padding tokens.
    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    /// True only on passage token positions.
    pub fn passage_mask(&self) -> Vec<bool> {
        (0..self.len())
            .map(|i| self.passage_token_range.contains(&i))
            .collect()
    }

    /// Retained-token index (absolute) for a passage char offset.
    pub fn char_to_token(&self, char_offset: usize) -> Option<usize> {
        let full = (*self.char_to_full_token.get(char_offset)?)?;
        if full < self.token_to_char.len() {
            Some(self.passage_token_range.start + full)
        } else {
            None
        }
    }

    /// (char_start, char_len) of a retained passage token (absolute index).
    pub fn token_char_span(&self, token_index: usize) -> Option<(usize, usize)> {
        if !self.passage_token_range.contains(&token_index) {
            return None;
        }
        self.token_to_char
            .get(token_index - self.passage_token_range.start)
            .copied()
    }

    /// Passage substring (by char offsets) covered by an inclusive token span.
    pub fn span_text(&self, span: TokenSpan) -> Option<String> {
        let (first_start, _) = self.token_char_span(span.start)?;
        let (last_start, last_len) = self.token_char_span(span.end)?;
        let end = last_start + last_len;
        Some(
            self.passage
                .chars()
                .skip(first_start)
                .take(end - first_start)
                .collect(),
        )
    }

    /// Concatenation of the retained passage tokens' surface forms.
    pub fn decoded_passage(&self, vocab: &Vocabulary) -> String {
        let sep = match vocab.mode() {
            TokenizeMode::Char => "",
            TokenizeMode::Whitespace => " ",
        };
        self.token_ids[self.passage_token_range.clone()]
            .iter()
            .map(|&id| vocab.token(id).unwrap_or(UNK_TOKEN))
            .collect::<Vec<_>>()
            .join(sep)
    }
}

/// Pack `[CLS] L1 [SEP] L2 [SEP] .. [SEP] passage [SEP]` padded to `max_len`.
/// Leading segments are never truncated; the passage is cut from the right.
pub fn encode_segments(
    leading: &[&str],
    passage: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedPair> {
    if leading.is_empty() {
        return Err(Error::Packing(
            "at least one leading segment required".into(),
        ));
    }
    if passage.is_empty() {
        return Err(Error::Packing("empty passage".into()));
    }
    let leading_tokens: Vec<Vec<String>> = leading
        .iter()
        .map(|text| tokenize(text, vocab.mode()))
        .collect();
    if let Some(i) = leading_tokens.iter().position(|t| t.is_empty()) {
        return Err(Error::Packing(format!(
            "segment {i} tokenized to nothing: {:?}",
            leading[i]
        )));
    }
    let overhead = 2 + leading.len(); // [CLS], one [SEP] per segment, final [SEP]
    let leading_total: usize = leading_tokens.iter().map(|t| t.len()).sum();
    if leading_total + overhead > max_len {
        return Err(Error::InputTooLong {
            needed: leading_total,
            limit: max_len.saturating_sub(overhead),
        });
    }

    let passage_tokens = tokenize_with_offsets(passage, vocab.mode());
    let budget = max_len - overhead - leading_total;
    let retained = passage_tokens.len().min(budget);

    let mut token_ids = Vec::with_capacity(max_len);
    let mut segment_ids = Vec::with_capacity(max_len);
    token_ids.push(CLS_ID);
    segment_ids.push(0);
    for tokens in &leading_tokens {
        for t in tokens {
            token_ids.push(vocab.id_of(t));
            segment_ids.push(0);
        }
        token_ids.push(SEP_ID);
        segment_ids.push(0);
    }
    let passage_start = token_ids.len();
    for (t, _, _) in passage_tokens.iter().take(retained) {
        token_ids.push(vocab.id_of(t));
        segment_ids.push(1);
    }
    let passage_end = token_ids.len();
    token_ids.push(SEP_ID);
    segment_ids.push(1);

    let real_len = token_ids.len();
    token_ids.resize(max_len, PAD_ID);
    segment_ids.resize(max_len, 0);
    let attention_mask = (0..max_len).map(|i| i < real_len).collect();

    let mut char_to_full_token = vec![None; passage.chars().count()];
    for (idx, (_, start, len)) in passage_tokens.iter().enumerate() {
        for slot in char_to_full_token[*start..start + len].iter_mut() {
            *slot = Some(idx);
        }
    }
    let token_to_char = passage_tokens
        .iter()
        .take(retained)
        .map(|(_, s, l)| (*s, *l))
        .collect();

    Ok(EncodedPair {
        token_ids,
        segment_ids,
        attention_mask,
        passage_token_range: passage_start..passage_end,
        passage: passage.to_string(),
        char_to_full_token,
        token_to_char,
    })
}

/// `[CLS] question [SEP] passage [SEP]` packing.
pub fn encode_pair(
    question: &str,
    passage: &str,
    vocab: &Vocabulary,
    max_len: usize,
) -> Result<EncodedPair> {
    encode_segments(&[question], passage, vocab, max_len)
}

/// Smallest token span covering a char interval of the passage.
/// Returns `None` when the interval was truncated away (or covers no token).
pub fn char_span_to_token_span(
    pair: &EncodedPair,
    char_start: usize,
    char_len: usize,
) -> Result<Option<TokenSpan>> {
    let passage_chars = pair.char_to_full_token.len();
    if char_len == 0 || char_start + char_len > passage_chars {
        return Err(Error::OffsetOutOfBounds {
            start: char_start,
            end: char_start + char_len,
            len: passage_chars,
        });
    }
    let mut first: Option<usize> = None;
    let mut last: Option<usize> = None;
    for c in char_start..char_start + char_len {
        if let Some(tok) = pair.char_to_full_token[c] {
            first = Some(first.map_or(tok, |f: usize| f.min(tok)));
            last = Some(last.map_or(tok, |l: usize| l.max(tok)));
        }
    }
    match (first, last) {
        (Some(f), Some(l)) if l < pair.token_to_char.len() => Ok(Some(TokenSpan::new(
            pair.passage_token_range.start + f,
            pair.passage_token_range.start + l,
        ))),
        _ => Ok(None),
    }
}
