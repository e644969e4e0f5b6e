//! Synthetic long-tailed multilingual corpus, vocabulary, batching and sampling.

mod batch;
mod corpus;
mod sampler;
mod vocab;

pub use batch::{Batch, IGNORE};
pub use corpus::{
    generate_corpus, generate_text, load_corpus, load_manifest, prototypes, regenerate, render_frames, save_corpus, stream_rng,
    zipf_tables, Corpus, CorpusManifest, CorpusSpec, LanguageSpec, SplitEntry, Utterance, ZipfTokens,
    MANIFEST_FILE, SPLITS,
};
pub use sampler::{permutation, BalancedSampler, BatchSampler, Pick, RandomSampler, SamplerParams, SamplerRegistry};
pub use vocab::{Vocabulary, BLANK, EOS, SOS, UNK};
