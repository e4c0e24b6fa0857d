//! Controlled data-contamination experiments on small masked-language-model encoders.
//!
//! Labeled downstream instances are injected into a synthetic pretraining
//! corpus, a BERT-style encoder is pretrained on it, and two measures are
//! read off: *Mem*, the cloze-probe accuracy gap between seen and unseen test
//! instances before fine-tuning, and *Expl*, the task accuracy gap after
//! fine-tuning.

pub mod contamination;
pub mod error;
pub mod evaluation;
pub mod lab;
pub mod model;
pub mod report;
pub mod tensor;
pub mod textdata;
pub mod training;

pub use error::{Error, Result};
