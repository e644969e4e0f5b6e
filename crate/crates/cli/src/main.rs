use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use a2_cli::config::{hash_str, TrainConfig};
use a2_cli::error::{CliError, Result};
use a2_cli::experiment::{
    evaluate, load_run, read_results, rescore, run_preset, sweep_table, sweep_tau, write_results, ResultsTable,
    Workspace, REPORT_JSON, REPORT_TXT,
};
use a2_cli::lm::{ensure_lm, lm_key};
use a2_cli::presets::PresetRegistry;
use a2_cli::train::{train, TrainData};
use a2_core::data::regenerate;
use a2_core::decode::average_checkpoint_files;
use clap::{Parser, Subcommand};

/// Multilingual speech recognition on synthetic long-tailed corpora.
///
/// Any config key can be set on the command line as `--section.key=value`.
#[derive(Parser, Debug)]
#[command(name = "a2", version)]
struct Cli {
    /// TOML config; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Directory holding corpora, LMs and run directories.
    #[arg(long, global = true, default_value = "runs")]
    workdir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus (or rebuild one from its manifest).
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        /// Rebuild the corpus recorded in DIR's manifest.
        #[arg(long, value_name = "DIR")]
        regenerate: Option<PathBuf>,
    },
    /// Pretrain the text LM used for decoder transfer.
    PretrainLm,
    /// Train one model; prints the run directory.
    Train {
        #[arg(long, default_value = "train")]
        label: String,
    },
    /// Decode a split with a trained run.
    Decode {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Checkpoint to load instead of the averaged one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Recompute error rates and the report from a decode dump.
    Eval {
        dump: PathBuf,
    },
    /// Average checkpoints elementwise.
    AverageCkpt {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Decode once per adjustment strength and tabulate CER against τ.
    SweepTau {
        #[arg(long)]
        run: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5")]
        values: Vec<f64>,
        #[arg(long, default_value = "valid")]
        split: String,
    },
    /// Run named presets end to end and print the result table.
    Preset {
        /// Preset names; `list` prints the registry.
        #[arg(required = true)]
        names: Vec<String>,
    },
}

/// Splits `--section.key=value` overrides from the arguments clap parses.
fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    args.into_iter().partition(|a| {
        a.strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .is_some_and(|(k, _)| k.contains('.'))
    })
}

fn write_table(dir: &Path, stem: &str, text: &str, json: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{stem}.txt")), text)?;
    fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

fn run(cli: Cli, overrides: Vec<String>) -> Result<()> {
    let ws = Workspace::new(&cli.workdir);
    let load = || TrainConfig::load(cli.config.as_deref(), &overrides);
    match cli.command {
        Command::GenData { seed, regenerate: Some(dir) } => {
            if seed.is_some() {
                return Err(CliError::Config("--seed conflicts with --regenerate".into()));
            }
            regenerate(&dir)?;
            println!("{} regenerated", dir.display());
        }
        Command::GenData { seed, regenerate: None } => {
            let mut cfg = load()?;
            if let Some(s) = seed {
                cfg.corpus.seed = s;
            }
            cfg.corpus.validate()?;
            ws.ensure_corpus(&cfg.corpus)?;
            println!("{}", ws.corpus_dir(&cfg.corpus).display());
        }
        Command::PretrainLm => {
            let cfg = load()?;
            let lm = ensure_lm(&ws.root, &cfg)?;
            println!("{}", ws.root.join(format!("lm-{}", lm_key(&cfg))).display());
            if let Some(l) = lm.losses.last() {
                println!("final loss {l:.4}");
            }
        }
        Command::Train { label } => {
            let cfg = load()?;
            let corpus = ws.ensure_corpus(&cfg.corpus)?;
            let data = TrainData::prepare(&cfg, &corpus)?;
            let lm = if cfg.lm.enabled { Some(ensure_lm(&ws.root, &cfg)?) } else { None };
            let dir = ws.run_dir(&label, &cfg);
            train(&cfg, &data, lm.as_ref(), &dir)?;
            println!("{}", dir.display());
        }
        Command::Decode { run, split, checkpoint } => {
            let loaded = load_run(&run, checkpoint.as_deref(), &overrides)?;
            let corpus = ws.ensure_corpus(&loaded.config.corpus)?;
            let data = TrainData::prepare(&loaded.config, &corpus)?;
            let (results, report) =
                evaluate(&loaded.model, &loaded.vocab, &data, &split, &loaded.config.decode, &loaded.log_pi)?;
            let key = hash_str(&serde_json::to_string(&(&loaded.config.decode, &checkpoint))?);
            let out = run.join(format!("decode-{split}-{key}"));
            write_results(&out, &results, &report)?;
            print!("{}", report.table());
            println!("{}", out.display());
        }
        Command::Eval { dump } => {
            let results = read_results(&dump)?;
            let mut order: Vec<String> = Vec::new();
            for r in &results {
                if !order.contains(&r.lang) {
                    order.push(r.lang.clone());
                }
            }
            let (_, report) = rescore(&results, &order)?;
            let dir = dump.parent().unwrap_or(Path::new("."));
            fs::write(dir.join(format!("eval-{REPORT_JSON}")), serde_json::to_string_pretty(&report)?)?;
            fs::write(dir.join(format!("eval-{REPORT_TXT}")), report.table())?;
            print!("{}", report.table());
        }
        Command::AverageCkpt { out, inputs } => {
            average_checkpoint_files(&inputs)?.save(&out)?;
            println!("{}", out.display());
        }
        Command::SweepTau { run, values, split } => {
            let loaded = load_run(&run, None, &overrides)?;
            let corpus = ws.ensure_corpus(&loaded.config.corpus)?;
            let data = TrainData::prepare(&loaded.config, &corpus)?;
            let points = sweep_tau(&loaded, &data, &split, &values)?;
            let text = sweep_table(&points, &data.languages);
            write_table(&run, &format!("sweep-{split}"), &text, &serde_json::to_string_pretty(&points)?)?;
            print!("{text}");
        }
        Command::Preset { names } => {
            let registry = PresetRegistry::default();
            if names == ["list"] {
                for n in registry.names() {
                    println!("{n:<22} {}", registry.get(n)?.description());
                }
                return Ok(());
            }
            let base = load()?;
            let mut table = ResultsTable::new(base.active_languages());
            for name in &names {
                let result = run_preset(&ws, name, &base)?;
                table.push(name, result.report);
            }
            let text = table.render();
            let stem = format!("table-{}", hash_str(&format!("{}|{}", names.join(","), base.hash())));
            write_table(&ws.root, &stem, &text, &table.to_json())?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (overrides, args) = split_overrides(std::env::args());
    let cli = Cli::parse_from(args);
    match run(cli, overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
