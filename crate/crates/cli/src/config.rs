//! Experiment configuration: one TOML file with a section per module, plus
//! `--section.key=value` overrides.

use std::path::Path;

use a2_core::data::CorpusSpec;
use a2_core::decode::DecodeConfig;
use a2_core::losses::LossConfig;
use a2_core::model::{LmConfig, ModelConfig};
use a2_core::tensorcore::Precision;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CliError, Result};
use crate::optim::OptimConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VocabConfig {
    pub min_count: usize,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self { min_count: 1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LoopConfig {
    /// Registered sampler name: `random` or `balanced`.
    pub sampler: String,
    /// Utterances per random batch.
    pub batch_size: usize,
    /// Utterances per language in a balanced batch.
    pub per_language: usize,
    pub epochs: usize,
    /// Restrict training and evaluation to these languages; empty keeps all.
    pub languages: Vec<String>,
    pub checkpoint_every: usize,
    pub keep_last: usize,
    /// Number of most recent epoch checkpoints averaged into the decoding model.
    pub average_last: usize,
    /// Beam width for the per-epoch validation CER.
    pub valid_beam: usize,
    /// Cap on validation utterances per language; 0 uses all of them.
    pub valid_per_language: usize,
    /// Storage precision for tapes inside the training loop; standalone decoding runs in double.
    pub precision: Precision,
}

impl Default for LoopConfig {
    fn default() -> Self {
        Self {
            sampler: "random".into(),
            batch_size: 16,
            per_language: 4,
            epochs: 10,
            languages: Vec::new(),
            checkpoint_every: 1,
            keep_last: 5,
            average_last: 5,
            valid_beam: 1,
            valid_per_language: 0,
            precision: Precision::Double,
        }
    }
}

/// Text LM pretraining and transfer into the decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmTransferConfig {
    pub enabled: bool,
    /// Freeze the copied decoder tensors instead of fine-tuning them.
    pub freeze: bool,
    pub model: LmConfig,
    pub sentences_per_language: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup: u64,
    pub scale: f64,
}

impl Default for LmTransferConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            freeze: false,
            model: LmConfig::default(),
            sentences_per_language: 1000,
            epochs: 4,
            batch_size: 16,
            warmup: 200,
            scale: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Seeds model initialization, batch sampling and scheduled sampling.
    pub seed: u64,
    pub corpus: CorpusSpec,
    pub vocab: VocabConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub decode: DecodeConfig,
    pub optim: OptimConfig,
    pub train: LoopConfig,
    pub lm: LmTransferConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            corpus: CorpusSpec::default(),
            vocab: VocabConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            decode: DecodeConfig::default(),
            optim: OptimConfig::default(),
            train: LoopConfig::default(),
            lm: LmTransferConfig::default(),
        }
    }
}

fn config_err(e: impl std::fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

impl TrainConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (defaults when `None`), applies `overrides` in order and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse_with(&text, overrides)
    }

    /// Parses TOML `text`, applies `overrides` in order and validates.
    pub fn parse_with(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(config_err)?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: Self = toml::Value::Table(root).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        self.optim.validate()?;
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 || t.per_language == 0 || t.valid_beam == 0 {
            return Err(CliError::Config("train: epochs, batch sizes and valid_beam must be positive".into()));
        }
        if t.checkpoint_every == 0 || t.keep_last == 0 || t.average_last == 0 {
            return Err(CliError::Config("train: checkpoint cadence, keep_last and average_last must be positive".into()));
        }
        if t.average_last > t.keep_last {
            return Err(CliError::Config(format!(
                "train.average_last {} exceeds keep_last {}",
                t.average_last, t.keep_last
            )));
        }
        let known = self.corpus.language_ids();
        if let Some(l) = t.languages.iter().find(|l| !known.contains(l)) {
            return Err(CliError::Config(format!("train.languages: {l:?} is not a corpus language")));
        }
        if self.model.feat_dim != self.corpus.feat_dim {
            return Err(CliError::Config(format!(
                "model.feat_dim {} differs from corpus.feat_dim {}",
                self.model.feat_dim, self.corpus.feat_dim
            )));
        }
        if self.lm.enabled {
            let (lm, m) = (&self.lm.model, &self.model);
            if lm.d_model != m.decoder_dim() || lm.heads != m.heads || lm.ffn_dim != m.ffn_dim {
                return Err(CliError::Config(
                    "lm.model width, heads and ffn_dim must match the decoder for transfer".into(),
                ));
            }
            if lm.layers < m.decoder_layers {
                return Err(CliError::Config(format!(
                    "lm.model has {} layers, the decoder needs {}",
                    lm.layers, m.decoder_layers
                )));
            }
            if self.lm.epochs == 0 || self.lm.batch_size == 0 || self.lm.sentences_per_language == 0 {
                return Err(CliError::Config("lm: epochs, batch_size and sentences_per_language must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// JSON with sorted keys; the basis of the run hash.
    pub fn canonical_json(&self) -> String {
        serde_json::to_value(self).expect("config serializes").to_string()
    }

    /// First 16 hex digits of the SHA-256 of [`Self::canonical_json`].
    pub fn hash(&self) -> String {
        hash_str(&self.canonical_json())
    }

    /// Languages trained and evaluated, in corpus order.
    pub fn active_languages(&self) -> Vec<String> {
        self.corpus
            .language_ids()
            .into_iter()
            .filter(|l| self.train.languages.is_empty() || self.train.languages.contains(l))
            .collect()
    }
}

pub fn hash_str(s: &str) -> String {
    let digest = Sha256::digest(s.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

/// Sets `section.key=value`. The value is parsed as a TOML literal and
/// falls back to a bare string.
pub fn apply_override(root: &mut toml::Table, spec: &str) -> Result<()> {
    let spec = spec.trim_start_matches("--");
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {spec:?} is not of the form section.key=value")))?;
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override key {path:?} is malformed")));
    }
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    let mut table = root;
    for k in &keys[..keys.len() - 1] {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    table.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        let back = TrainConfig::from_toml_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn overrides_parse_typed_values() {
        let cfg = TrainConfig::load(
            None,
            &[
                "--loss.tau=0.3".into(),
                "--train.sampler=balanced".into(),
                "--model.adapters.enabled=true".into(),
                "--train.languages=[\"en\", \"ky\"]".into(),
                "--seed=9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.tau, 0.3);
        assert_eq!(cfg.train.sampler, "balanced");
        assert!(cfg.model.adapters.enabled);
        assert_eq!(cfg.train.languages, ["en", "ky"]);
        assert_eq!(cfg.seed, 9);
        assert_ne!(cfg.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn unknown_keys_and_bad_ranges_are_config_errors() {
        for o in ["--loss.tua=0.3", "--loss.lambda=1.5", "--decode.beam=0", "--train.languages=[\"xx\"]", "nodots"] {
            let e = TrainConfig::load(None, &[o.to_string()]).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{o}: {e}");
        }
    }

    #[test]
    fn hash_ignores_key_order() {
        let a = TrainConfig::from_toml_str("seed = 3\n[loss]\ntau = 0.2\nlambda = 0.4\n").unwrap();
        let b = TrainConfig::from_toml_str("[loss]\nlambda = 0.4\ntau = 0.2\n\n").unwrap();
        assert_ne!(a.hash(), b.hash());
        let b = TrainConfig { seed: 3, ..b };
        assert_eq!(a.hash(), b.hash());
    }
}
