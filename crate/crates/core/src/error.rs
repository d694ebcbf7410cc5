//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // ── numeric kernel ───────────────────────────────────────────────
    #[error("shape mismatch in {op}: left {left_rows}x{left_cols}, right {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("invalid mask: row {row} of masked softmax has no unmasked position")]
    FullyMaskedRow { row: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("gold index {index} points at a masked position")]
    MaskedGoldIndex { index: usize },
    #[error("degenerate zero-norm vector in cosine similarity")]
    DegenerateVector,
    #[error("training divergence: non-finite gradient for parameter `{name}`")]
    TrainingDivergence { name: String },
    #[error("training diverged at step {step}: loss is not finite")]
    NonFiniteLoss { step: u64 },
    #[error("loss function is not deterministic: {first} vs {second}")]
    NonDeterministicLoss { first: f64, second: f64 },
    #[error("schedule exhausted: step {step} >= total steps {total}")]
    ScheduleExhausted { step: u64, total: u64 },

    // ── text processing ──────────────────────────────────────────────
    #[error("input too long: question needs {needed} tokens but the packing budget is {limit}")]
    InputTooLong { needed: usize, limit: usize },
    #[error("char interval {start}..{end} out of passage bounds (passage has {len} chars)")]
    OffsetOutOfBounds { start: usize, end: usize, len: usize },
    #[error("token id {id} out of vocabulary range {vocab_size}")]
    TokenIdOutOfRange { id: u32, vocab_size: usize },
    #[error("sequence of {len} tokens exceeds encoder maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    // ── models ───────────────────────────────────────────────────────
    #[error("packing error: {0}")]
    Packing(String),
    #[error("supervision error for example `{id}`: {reason}")]
    Supervision { id: String, reason: String },
    #[error("no valid span candidate to decode")]
    DecodeEmpty,
    #[error("span {start}..={end} invalid for sequence of {len}")]
    InvalidSpan { start: usize, end: usize, len: usize },

    // ── data ─────────────────────────────────────────────────────────
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },
    #[error("validation failed for qa `{qa_id}`: {reason}")]
    Validation { qa_id: String, reason: String },
    #[error("degenerate translation: {0}")]
    DegenerateTranslation(String),
    #[error("duplicate example id `{0}`")]
    DuplicateId(String),
    #[error("empty reference list for example `{0}`")]
    EmptyReferences(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("invalid configuration: {0}")]
    Config(String),
}
