//! Run directories, preset execution, evaluation dumps and the τ sweep.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use a2_core::data::{generate_corpus, load_corpus, save_corpus, Corpus, CorpusSpec, Vocabulary, MANIFEST_FILE};
use a2_core::decode::{DecodeConfig, Report, UttResult};
use a2_core::losses::ClassPriors;
use a2_core::model::{Checkpoint, SpeechTransformer};
use serde::{Deserialize, Serialize};

use crate::config::{hash_str, TrainConfig};
use crate::error::{CliError, Result};
use crate::lm::ensure_lm;
use crate::presets::PresetRegistry;
use crate::train::{decode_utterances, train, TrainData, AVERAGED_CKPT, CONFIG_FILE, PRIORS_FILE, VOCAB_FILE};

pub const DECODE_FILE: &str = "decode.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";

/// Root directory holding corpora, pretrained LMs and run directories, each
/// named by a hash of the configuration that produced it.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn corpus_dir(&self, spec: &CorpusSpec) -> PathBuf {
        let key = serde_json::to_value(spec).expect("spec serializes").to_string();
        self.root.join(format!("data-{}", hash_str(&key)))
    }

    pub fn run_dir(&self, label: &str, cfg: &TrainConfig) -> PathBuf {
        self.root.join(format!("{label}-{}", cfg.hash()))
    }

    /// Loads the corpus for `spec`, generating and saving it on first use.
    pub fn ensure_corpus(&self, spec: &CorpusSpec) -> Result<Corpus> {
        let dir = self.corpus_dir(spec);
        if dir.join(MANIFEST_FILE).exists() {
            let (manifest, corpus) = load_corpus(&dir)?;
            if &manifest.spec != spec {
                return Err(CliError::Data(format!("{} holds a different corpus spec", dir.display())));
            }
            return Ok(corpus);
        }
        let corpus = generate_corpus(spec)?;
        save_corpus(&dir, spec, &corpus)?;
        Ok(corpus)
    }
}

/// A trained run reloaded from its directory with averaged weights.
pub struct LoadedRun {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub log_pi: Vec<f64>,
    pub model: SpeechTransformer,
}

/// `overrides` apply on top of the stored config; only decode settings
/// should differ from training for the weights to fit.
pub fn load_run(run_dir: &Path, checkpoint: Option<&Path>, overrides: &[String]) -> Result<LoadedRun> {
    let text = fs::read_to_string(run_dir.join(CONFIG_FILE))
        .map_err(|e| CliError::Config(format!("{}: {e}", run_dir.join(CONFIG_FILE).display())))?;
    let config = TrainConfig::parse_with(&text, overrides)?;
    let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(run_dir.join(VOCAB_FILE))?)?;
    let log_pi: Vec<f64> = ClassPriors::load(&run_dir.join(PRIORS_FILE))?.iter().map(|p| p.ln()).collect();
    let mut model = SpeechTransformer::new(&config.model, vocab.model_size(), &config.active_languages(), config.seed)?;
    let ck_path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| run_dir.join(AVERAGED_CKPT));
    Checkpoint::load(&ck_path)?.restore_into(&mut model.store)?;
    Ok(LoadedRun {
        config,
        vocab,
        log_pi,
        model,
    })
}

pub fn write_results(dir: &Path, results: &[UttResult], report: &Report) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut w = BufWriter::new(File::create(dir.join(DECODE_FILE))?);
    for r in results {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    fs::write(dir.join(REPORT_JSON), serde_json::to_string_pretty(report)?)?;
    fs::write(dir.join(REPORT_TXT), report.table())?;
    Ok(())
}

pub fn read_results(path: &Path) -> Result<Vec<UttResult>> {
    let f = File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: UttResult = serde_json::from_str(&line)
            .map_err(|e| CliError::Data(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(r);
    }
    Ok(out)
}

/// Recomputes every per-utterance rate and the report from a decode dump.
pub fn rescore(results: &[UttResult], order: &[String]) -> Result<(Vec<UttResult>, Report)> {
    let fresh = results.iter().map(|r| r.rescore()).collect::<a2_core::Result<Vec<_>>>()?;
    let report = Report::from_results(&fresh, order)?;
    Ok((fresh, report))
}

/// Decodes one split of a corpus with a trained model.
pub fn evaluate(
    model: &SpeechTransformer,
    vocab: &Vocabulary,
    data: &TrainData,
    split: &str,
    decode: &DecodeConfig,
    log_pi: &[f64],
) -> Result<(Vec<UttResult>, Report)> {
    let results = decode_utterances(model, vocab, data.split(split)?, decode, Some(log_pi))?;
    let report = Report::from_results(&results, &data.languages)?;
    Ok((results, report))
}

/// Trains `cfg` under `label` and decodes its test split.
pub fn train_and_test(ws: &Workspace, label: &str, cfg: &TrainConfig, corpus: &Corpus) -> Result<(PathBuf, Report)> {
    let data = TrainData::prepare(cfg, corpus)?;
    let lm = if cfg.lm.enabled { Some(ensure_lm(&ws.root, cfg)?) } else { None };
    let run_dir = ws.run_dir(label, cfg);
    let outcome = train(cfg, &data, lm.as_ref(), &run_dir)?;
    let log_pi = data.priors.log_pi();
    let (results, report) = evaluate(&outcome.model, &data.vocab, &data, "test", &cfg.decode, &log_pi)?;
    write_results(&run_dir.join("test"), &results, &report)?;
    Ok((run_dir, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PresetResult {
    pub preset: String,
    pub run_dirs: Vec<PathBuf>,
    pub report: Report,
}

/// Runs a named preset end to end on `base` and returns its test report.
/// Per-language presets train one model per language and merge the results.
pub fn run_preset(ws: &Workspace, name: &str, base: &TrainConfig) -> Result<PresetResult> {
    let registry = PresetRegistry::default();
    let preset = registry.get(name)?;
    let cfg = registry.configure(name, base)?;
    let corpus = ws.ensure_corpus(&cfg.corpus)?;
    if !preset.per_language() {
        let (dir, report) = train_and_test(ws, name, &cfg, &corpus)?;
        return Ok(PresetResult {
            preset: name.into(),
            run_dirs: vec![dir],
            report,
        });
    }
    let mut dirs = Vec::new();
    let mut all = Vec::new();
    for lang in cfg.active_languages() {
        let mut one = cfg.clone();
        one.train.languages = vec![lang.clone()];
        let (dir, _) = train_and_test(ws, &format!("{name}-{lang}"), &one, &corpus)?;
        all.extend(read_results(&dir.join("test").join(DECODE_FILE))?);
        dirs.push(dir);
    }
    Ok(PresetResult {
        preset: name.into(),
        run_dirs: dirs,
        report: Report::from_results(&all, &cfg.active_languages())?,
    })
}

/// Systems as rows, languages as columns, macro average last; CER in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub languages: Vec<String>,
    pub rows: Vec<(String, Report)>,
}

impl ResultsTable {
    pub fn new(languages: Vec<String>) -> Self {
        Self {
            languages,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, system: &str, report: Report) {
        self.rows.push((system.to_string(), report));
    }

    pub fn render(&self) -> String {
        let width = self.rows.iter().map(|(s, _)| s.len()).max().unwrap_or(0).max(6);
        let mut s = format!("{:<width$}", "system");
        for l in &self.languages {
            let _ = write!(s, " {l:>7}");
        }
        let _ = writeln!(s, " {:>7}", "avg");
        for (name, rep) in &self.rows {
            let _ = write!(s, "{name:<width$}");
            for l in &self.languages {
                match rep.row(l) {
                    Some(r) => {
                        let _ = write!(s, " {:>7.2}", 100.0 * r.cer);
                    }
                    None => {
                        let _ = write!(s, " {:>7}", "-");
                    }
                }
            }
            let _ = writeln!(s, " {:>7.2}", 100.0 * rep.macro_cer);
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub tau: f64,
    pub report: Report,
}

/// One decode per τ with inference-phase adjustment; everything else fixed.
pub fn sweep_tau(run: &LoadedRun, data: &TrainData, split: &str, taus: &[f64]) -> Result<Vec<SweepPoint>> {
    taus.iter()
        .map(|&tau| {
            let dcfg = DecodeConfig {
                tau,
                ..run.config.decode.clone()
            };
            dcfg.validate()?;
            let (_, report) = evaluate(&run.model, &run.vocab, data, split, &dcfg, &run.log_pi)?;
            Ok(SweepPoint { tau, report })
        })
        .collect()
}

pub fn sweep_table(points: &[SweepPoint], languages: &[String]) -> String {
    let mut table = ResultsTable::new(languages.to_vec());
    for p in points {
        table.push(&format!("tau={}", p.tau), p.report.clone());
    }
    table.render()
}
