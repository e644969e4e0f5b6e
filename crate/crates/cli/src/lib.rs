//! Training, decoding and experiment orchestration for the multilingual
//! speech recognizer in `a2-core`.

pub mod config;
pub mod error;
pub mod experiment;
pub mod lm;
pub mod optim;
pub mod presets;
pub mod train;
