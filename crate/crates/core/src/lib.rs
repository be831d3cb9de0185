//! Knowledge-aware BiLSTM sequence labeling.
//!
//! The crate trains bilinear knowledge-base embeddings, encodes sentences
//! with a bidirectional LSTM, lets each position attend over candidate
//! concepts for its token (with a learned sentinel that can opt out of the
//! knowledge base entirely), and decodes tag sequences with either a
//! per-token softmax or a linear-chain CRF. Synthetic data generators and
//! finite-difference audits make every moving part checkable end to end.

pub mod audit;
mod container;
pub mod crf;
pub mod error;
pub mod kbembed;
pub mod knowattn;
pub mod pipeline;
pub mod numerics;
pub mod synth;
pub mod validate;
pub mod rnn;

pub use error::{Error, Result};
