//! Named configurations for the system grid: baselines, adapters, LM
//! transfer and the two adjustment modes.

use std::collections::BTreeMap;

use a2_core::model::Placement;

use crate::config::TrainConfig;
use crate::error::{CliError, Result};

/// Adjustment strength used by every adjusting preset.
pub const PRESET_TAU: f64 = 0.3;

pub trait Preset {
    fn name(&self) -> &str;
    fn description(&self) -> &str;
    fn apply(&self, cfg: &mut TrainConfig);
    /// Train one model per language instead of one multilingual model.
    fn per_language(&self) -> bool {
        false
    }
}

struct FnPreset {
    name: &'static str,
    description: &'static str,
    apply: fn(&mut TrainConfig),
    per_language: bool,
}

impl Preset for FnPreset {
    fn name(&self) -> &str {
        self.name
    }

    fn description(&self) -> &str {
        self.description
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        (self.apply)(cfg)
    }

    fn per_language(&self) -> bool {
        self.per_language
    }
}

fn smt(c: &mut TrainConfig) {
    c.train.sampler = "random".into();
    c.model.adapters.enabled = false;
    c.loss.tau = 0.0;
    c.decode.tau = 0.0;
    c.lm.enabled = false;
}

fn bs(c: &mut TrainConfig) {
    smt(c);
    c.train.sampler = "balanced".into();
}

fn with_lm(c: &mut TrainConfig) {
    c.lm.enabled = true;
}

fn dual(c: &mut TrainConfig) {
    c.model.adapters.enabled = true;
    c.model.adapters.common = true;
}

fn smt_lm(c: &mut TrainConfig) {
    smt(c);
    with_lm(c);
}

fn bs_lm(c: &mut TrainConfig) {
    bs(c);
    with_lm(c);
}

fn bs_dual(c: &mut TrainConfig) {
    bs(c);
    dual(c);
}

fn dual_adapters(c: &mut TrainConfig) {
    bs(c);
    with_lm(c);
    dual(c);
}

pub struct PresetRegistry {
    presets: BTreeMap<String, Box<dyn Preset>>,
}

impl Default for PresetRegistry {
    fn default() -> Self {
        let mut r = Self {
            presets: BTreeMap::new(),
        };
        let table: [(&'static str, &'static str, fn(&mut TrainConfig), bool); 19] = [
            ("mono", "one model per language on its own slice", smt, true),
            ("smt", "pooled random batches", smt, false),
            ("bs", "balanced batches, equal utterances per language", bs, false),
            ("smt_lm", "smt with LM transfer", smt_lm, false),
            ("bs_lm", "bs with LM transfer", bs_lm, false),
            ("bs_dual", "bs with dual adapters, no LM transfer", bs_dual, false),
            (
                "lan_specific",
                "bs + LM transfer + language adapters without the common adapter",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.common = false;
                },
                false,
            ),
            ("dual_adapters", "bs + LM transfer + dual adapters", dual_adapters, false),
            (
                "a2_adjust_train",
                "dual adapters with training-phase logit adjustment",
                |c| {
                    dual_adapters(c);
                    c.loss.tau = PRESET_TAU;
                },
                false,
            ),
            (
                "a2_adjust_infer",
                "dual adapters with inference-phase logit adjustment",
                |c| {
                    dual_adapters(c);
                    c.decode.tau = PRESET_TAU;
                },
                false,
            ),
            (
                "smt_adjust_train",
                "smt with training-phase logit adjustment",
                |c| {
                    smt(c);
                    c.loss.tau = PRESET_TAU;
                },
                false,
            ),
            (
                "smt_lm_adjust_train",
                "smt + LM transfer with training-phase logit adjustment",
                |c| {
                    smt_lm(c);
                    c.loss.tau = PRESET_TAU;
                },
                false,
            ),
            (
                "smt_lm_adjust_infer",
                "smt + LM transfer with inference-phase logit adjustment",
                |c| {
                    smt_lm(c);
                    c.decode.tau = PRESET_TAU;
                },
                false,
            ),
            (
                "adapters_decoder",
                "dual adapters in the decoder only",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.placement = Placement::Decoder;
                },
                false,
            ),
            (
                "adapters_encoder",
                "dual adapters in the encoder only",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.placement = Placement::Encoder;
                },
                false,
            ),
            (
                "adapters_both",
                "dual adapters in encoder and decoder",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.placement = Placement::Both;
                },
                false,
            ),
            (
                "dual_by_script",
                "dual adapters shared by writing script",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.grouping = "by_script".into();
                },
                false,
            ),
            (
                "dual_by_family",
                "dual adapters shared by language family",
                |c| {
                    dual_adapters(c);
                    c.model.adapters.grouping = "by_family".into();
                },
                false,
            ),
            (
                "mono_adjust_train",
                "monolingual models with training-phase logit adjustment",
                |c| {
                    smt(c);
                    c.loss.tau = PRESET_TAU;
                },
                true,
            ),
        ];
        for (name, description, apply, per_language) in table {
            r.register(Box::new(FnPreset {
                name,
                description,
                apply,
                per_language,
            }));
        }
        r
    }
}

impl PresetRegistry {
    pub fn register(&mut self, preset: Box<dyn Preset>) {
        self.presets.insert(preset.name().to_string(), preset);
    }

    pub fn names(&self) -> Vec<&str> {
        self.presets.keys().map(String::as_str).collect()
    }

    pub fn get(&self, name: &str) -> Result<&dyn Preset> {
        self.presets
            .get(name)
            .map(|p| p.as_ref())
            .ok_or_else(|| CliError::Config(format!("unknown preset {name:?}; known: {:?}", self.names())))
    }

    /// `base` with the preset applied.
    pub fn configure(&self, name: &str, base: &TrainConfig) -> Result<TrainConfig> {
        let mut cfg = base.clone();
        self.get(name)?.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}
