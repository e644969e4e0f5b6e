//! Joint CTC/attention beam search, character error rates and checkpoint averaging.

mod average;
mod beam;
mod metrics;
mod prefix;

pub use average::{average_checkpoint_files, average_checkpoints};
pub use beam::{beam_search, decode_utterance, BeamResult, DecodeConfig, Hypothesis};
pub use metrics::{cer, char_errors, edit_distance, LanguageRow, Report, UttResult};
pub use prefix::{CtcPrefixScorer, CtcPrefixState};
