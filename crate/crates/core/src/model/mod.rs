//! The recognizer, the text language model and parameter transfer between them.

mod checkpoint;
mod config;
mod lm;
mod speech;

pub use checkpoint::{Checkpoint, CheckpointHeader, ParamEntry, CHECKPOINT_VERSION};
pub use config::{AdapterConfig, ModelConfig, Placement};
pub use lm::{
    build_vocab_map, decoder_text_perplexity, transfer_parameters, LmConfig, LmLayer, TextLM, TransferReport, VocabMap,
};
pub use speech::{DecoderLayer, DecoderMemory, DecoderState, Encoded, EncoderLayer, SpeechTransformer};
