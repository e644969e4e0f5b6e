use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::ResidualMode;
use crate::error::{Error, Result};

/// Which transformer stacks carry dual adapters.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    #[default]
    Encoder,
    Decoder,
    Both,
}

impl Placement {
    pub fn encoder(self) -> bool {
        matches!(self, Placement::Encoder | Placement::Both)
    }

    pub fn decoder(self) -> bool {
        matches!(self, Placement::Decoder | Placement::Both)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub enabled: bool,
    pub placement: Placement,
    pub bottleneck: usize,
    /// Name of a registered grouping strategy.
    pub grouping: String,
    /// Language → adapter key, used by the `custom` grouping.
    pub custom_groups: BTreeMap<String, String>,
    pub common: bool,
    pub residual: ResidualMode,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            placement: Placement::Encoder,
            bottleneck: 8,
            grouping: "individual".into(),
            custom_groups: BTreeMap::new(),
            common: true,
            residual: ResidualMode::Single,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub feat_dim: usize,
    /// Frames stacked by the front-end.
    pub stack: usize,
    pub d_model: usize,
    /// Decoder width; a learned bridge maps encoder states when it differs.
    pub d_decoder: Option<usize>,
    pub heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub adapters: AdapterConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feat_dim: 8,
            stack: 2,
            d_model: 32,
            d_decoder: None,
            heads: 2,
            ffn_dim: 64,
            encoder_layers: 2,
            decoder_layers: 1,
            dropout: 0.0,
            adapters: AdapterConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn decoder_dim(&self) -> usize {
        self.d_decoder.unwrap_or(self.d_model)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model: {m}")));
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("stack", self.stack),
            ("d_model", self.d_model),
            ("decoder_dim", self.decoder_dim()),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("decoder_layers", self.decoder_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if !self.d_model.is_multiple_of(self.heads) || !self.decoder_dim().is_multiple_of(self.heads) {
            return bad(format!("{} heads must divide both model widths", self.heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.adapters.enabled {
            let b = self.adapters.bottleneck;
            let needs_dec = self.adapters.placement.decoder();
            if b == 0 || b >= self.d_model || (needs_dec && b >= self.decoder_dim()) {
                return bad(format!("adapter bottleneck {b} must be below the model width"));
            }
        }
        Ok(())
    }
}
