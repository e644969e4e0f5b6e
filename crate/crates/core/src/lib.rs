//! Hybrid CTC/attention sequence recognizer for long-tailed multilingual data.
//!
//! The crate is organized bottom-up: [`tensorcore`] provides reverse-mode
//! autodiff, [`layers`] and [`adapters`] build the transformer blocks,
//! [`model`] assembles the recognizer and the text LM, [`losses`] holds the
//! training objectives and class priors, [`data`] generates and batches the
//! synthetic corpus, and [`decode`] runs joint beam search and scoring.

pub mod tensorcore;
pub mod error;
pub mod layers;
pub mod adapters;
pub mod losses;
pub mod data;
pub mod model;
pub mod decode;

pub use error::{Error, Result};
