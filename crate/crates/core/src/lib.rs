//! Desk-scale cross-lingual machine reading comprehension.
//!
//! The crate builds up from a small f64 reverse-mode autodiff kernel
//! (`tensor`, `tape`, `optim`, `gradcheck`) to a shared transformer
//! encoder, monolingual and bilingual span-extraction models, the
//! back-translation answer aligner, and EM/F1 evaluation.

pub mod data;
pub mod dual;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod simplematch;
pub mod span;
pub mod tape;
pub mod tensor;
pub mod text;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
