//! Dual residual adapters: one adapter per language (or language group) plus
//! a common adapter shared by every language.
//!
//! Each adapter computes `Δ(h) = W_u·ReLU(W_d·LayerNorm(h))`. By default the
//! bank output is `h + Δ_lang(h) + Δ_com(h)`, keeping a single residual copy
//! of `h`; [`ResidualMode::Literal`] instead sums two full adapter outputs,
//! `(h + Δ_lang) + (h + Δ_com)`.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{xavier_uniform, LayerNorm, Linear};
use crate::tensorcore::{Binder, ParamStore, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Adapter {
    pub ln: LayerNorm,
    pub down: Linear,
    pub up: Linear,
    pub bottleneck: usize,
}

impl Adapter {
    /// `W_u` starts at zero, so a fresh adapter is an exact identity.
    pub fn new(store: &mut ParamStore, name: &str, d: usize, bottleneck: usize, rng: &mut impl Rng) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= d {
            return Err(Error::Config(format!(
                "adapter bottleneck {bottleneck} must be in 1..{d}"
            )));
        }
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), d),
            down: Linear::with_weight(store, &format!("{name}.down"), xavier_uniform(rng, d, bottleneck, 0.5)),
            up: Linear::zeros(store, &format!("{name}.up"), bottleneck, d),
            bottleneck,
        })
    }

    pub fn delta<'t>(&self, bd: &Binder<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        let z = self.down.forward(bd, self.ln.forward(bd, h)?)?.relu();
        self.up.forward(bd, z)
    }

    /// `W_u(ReLU(W_d(LayerNorm(h)))) + h`
    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, h: Var<'t>) -> Result<Var<'t>> {
        Ok(h.add(self.delta(bd, h)?)?)
    }

    pub fn delta_apply(&self, store: &ParamStore, h: &Tensor) -> Result<Tensor> {
        let z = self.down.apply(store, &self.ln.apply(store, h))?.map(|v| v.max(0.0));
        self.up.apply(store, &z)
    }

    pub fn num_params(&self) -> usize {
        self.ln.num_params() + self.down.num_params() + self.up.num_params()
    }
}

/// Closed-form parameter count of `adapters` adapters in each of `layers` layers.
pub fn adapter_param_count(adapters: usize, layers: usize, d: usize, bottleneck: usize) -> usize {
    adapters * layers * (d * bottleneck + bottleneck * d + bottleneck + d + 2 * d)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResidualMode {
    #[default]
    Single,
    Literal,
}

/// Language-specific adapters keyed by route, plus an optional common adapter.
#[derive(Clone, Debug)]
pub struct DualAdapterBank {
    adapters: BTreeMap<String, Adapter>,
    common: Option<Adapter>,
    routes: BTreeMap<String, String>,
    mode: ResidualMode,
}

impl DualAdapterBank {
    /// One adapter is created per distinct route key, in sorted key order.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        bottleneck: usize,
        routes: &BTreeMap<String, String>,
        with_common: bool,
        mode: ResidualMode,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut adapters = BTreeMap::new();
        let keys: std::collections::BTreeSet<&String> = routes.values().collect();
        for key in keys {
            let a = Adapter::new(store, &format!("{name}.lang.{key}"), d, bottleneck, rng)?;
            adapters.insert(key.clone(), a);
        }
        let common = if with_common {
            Some(Adapter::new(store, &format!("{name}.common"), d, bottleneck, rng)?)
        } else {
            None
        };
        Ok(Self {
            adapters,
            common,
            routes: routes.clone(),
            mode,
        })
    }

    pub fn route(&self, lang: &str) -> Result<(&str, &Adapter)> {
        let key = self.routes.get(lang).ok_or_else(|| Error::Routing {
            lang: lang.to_string(),
            known: self.routes.keys().cloned().collect(),
        })?;
        Ok((key.as_str(), &self.adapters[key]))
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.adapters.keys().map(String::as_str)
    }

    pub fn adapter(&self, key: &str) -> Option<&Adapter> {
        self.adapters.get(key)
    }

    pub fn common(&self) -> Option<&Adapter> {
        self.common.as_ref()
    }

    pub fn num_adapters(&self) -> usize {
        self.adapters.len() + usize::from(self.common.is_some())
    }

    pub fn num_params(&self) -> usize {
        self.adapters.values().chain(&self.common).map(Adapter::num_params).sum()
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, h: Var<'t>, lang: &str) -> Result<Var<'t>> {
        let (_, lang_adapter) = self.route(lang)?;
        match self.mode {
            ResidualMode::Single => {
                let mut out = h.add(lang_adapter.delta(bd, h)?)?;
                if let Some(c) = &self.common {
                    out = out.add(c.delta(bd, h)?)?;
                }
                Ok(out)
            }
            ResidualMode::Literal => {
                let mut out = lang_adapter.forward(bd, h)?;
                if let Some(c) = &self.common {
                    out = out.add(c.forward(bd, h)?)?;
                }
                Ok(out)
            }
        }
    }

    /// Routes every utterance in a batch through its own language adapter.
    pub fn forward_batch<'t>(&self, bd: &Binder<'t, '_>, hs: &[Var<'t>], mask: &LanguageMask) -> Result<Vec<Var<'t>>> {
        if hs.len() != mask.langs.len() {
            return Err(Error::Contract(format!(
                "{} hidden states for a mask of {} utterances",
                hs.len(),
                mask.langs.len()
            )));
        }
        hs.iter().zip(&mask.langs).map(|(h, lang)| self.forward(bd, *h, lang)).collect()
    }

    pub fn apply(&self, store: &ParamStore, h: &Tensor, lang: &str) -> Result<Tensor> {
        let (_, lang_adapter) = self.route(lang)?;
        let mut out = match self.mode {
            ResidualMode::Single => h.add(&lang_adapter.delta_apply(store, h)?)?,
            ResidualMode::Literal => h.add(&lang_adapter.delta_apply(store, h)?)?.add(h)?,
        };
        if let Some(c) = &self.common {
            out = out.add(&c.delta_apply(store, h)?)?;
        }
        Ok(out)
    }
}

/// Per-utterance adapter routing for one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageMask {
    pub langs: Vec<String>,
    pub keys: Vec<String>,
}

impl LanguageMask {
    pub fn key_counts(&self) -> BTreeMap<&str, usize> {
        let mut counts = BTreeMap::new();
        for k in &self.keys {
            *counts.entry(k.as_str()).or_insert(0) += 1;
        }
        counts
    }
}

pub fn make_language_mask(langs: &[Option<&str>], routes: &BTreeMap<String, String>) -> Result<LanguageMask> {
    let mut mask = LanguageMask {
        langs: Vec::with_capacity(langs.len()),
        keys: Vec::with_capacity(langs.len()),
    };
    for (i, lang) in langs.iter().enumerate() {
        let lang = lang.ok_or_else(|| Error::Data(format!("utterance {i} in batch has no language tag")))?;
        let key = routes.get(lang).ok_or_else(|| Error::Routing {
            lang: lang.to_string(),
            known: routes.keys().cloned().collect(),
        })?;
        mask.langs.push(lang.to_string());
        mask.keys.push(key.clone());
    }
    Ok(mask)
}

/// Maps a language to the key of the adapter it shares.
pub trait AdapterGrouping {
    fn name(&self) -> &str;
    fn group(&self, lang: &str) -> Option<String>;
}

pub struct Individual;

impl AdapterGrouping for Individual {
    fn name(&self) -> &str {
        "individual"
    }

    fn group(&self, lang: &str) -> Option<String> {
        Some(lang.to_string())
    }
}

/// Fixed language → group table; languages missing from it keep their own adapter.
pub struct TableGrouping {
    name: &'static str,
    table: &'static [(&'static str, &'static [&'static str])],
}

impl AdapterGrouping for TableGrouping {
    fn name(&self) -> &str {
        self.name
    }

    fn group(&self, lang: &str) -> Option<String> {
        self.table
            .iter()
            .find(|(_, members)| members.contains(&lang))
            .map(|(g, _)| g.to_string())
            .or_else(|| Some(lang.to_string()))
    }
}

pub const FAMILIES: &[(&str, &[&str])] = &[
    ("germanic", &["en", "nl"]),
    ("romance", &["fr", "es", "it", "sv"]),
    ("turkic", &["tr", "tt", "ky"]),
    ("chinese", &["zh"]),
];

pub const SCRIPTS: &[(&str, &[&str])] = &[
    ("latin", &["en", "fr", "es", "it", "nl", "tr", "sv"]),
    ("chinese", &["zh"]),
    ("cyrillic", &["ru", "tt", "ky"]),
];

pub struct CustomGrouping(pub BTreeMap<String, String>);

impl AdapterGrouping for CustomGrouping {
    fn name(&self) -> &str {
        "custom"
    }

    fn group(&self, lang: &str) -> Option<String> {
        self.0.get(lang).cloned()
    }
}

type GroupingFactory = Box<dyn Fn(&BTreeMap<String, String>) -> Box<dyn AdapterGrouping>>;

/// Grouping strategies selectable by name from configuration.
pub struct GroupingRegistry {
    entries: Vec<(String, GroupingFactory)>,
}

impl Default for GroupingRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("individual", Box::new(|_| Box::new(Individual)));
        r.register(
            "by_family",
            Box::new(|_| Box::new(TableGrouping { name: "by_family", table: FAMILIES })),
        );
        r.register(
            "by_script",
            Box::new(|_| Box::new(TableGrouping { name: "by_script", table: SCRIPTS })),
        );
        r.register("custom", Box::new(|map| Box::new(CustomGrouping(map.clone()))));
        r
    }
}

impl GroupingRegistry {
    pub fn register(&mut self, name: &str, factory: GroupingFactory) {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn get(&self, name: &str, custom: &BTreeMap<String, String>) -> Result<Box<dyn AdapterGrouping>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, f)| f(custom))
            .ok_or_else(|| Error::Config(format!("unknown adapter grouping {name:?}; known: {:?}", self.names())))
    }

    /// Resolves every language to exactly one adapter key.
    pub fn resolve(&self, name: &str, custom: &BTreeMap<String, String>, languages: &[String]) -> Result<BTreeMap<String, String>> {
        let strategy = self.get(name, custom)?;
        languages
            .iter()
            .map(|l| {
                strategy
                    .group(l)
                    .map(|k| (l.clone(), k))
                    .ok_or_else(|| Error::Config(format!("grouping {name:?} has no route for language {l:?}")))
            })
            .collect()
    }
}
