//! The training loop.

use std::collections::VecDeque;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use a2_core::data::{stream_rng, Batch, Corpus, SamplerParams, SamplerRegistry, Utterance, Vocabulary};
use a2_core::decode::{average_checkpoints, beam_search, DecodeConfig, Report, UttResult};
use a2_core::losses::{
    adjust_logits_var, attention_loss_sum, ctc_loss, mtl_loss, scheduled_sample, ClassPriors, LossConfig,
};
use a2_core::model::{build_vocab_map, transfer_parameters, Checkpoint, SpeechTransformer};
use a2_core::tensorcore::{with_precision, Binder, Tape, Var};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{CliError, Result};
use crate::lm::PretrainedLm;
use crate::optim::{clip_global_norm, global_norm, noam_lr, Adam, GradAccumulator};

const SCHEDULED_SAMPLING_DOMAIN: u64 = 4 << 40;

/// Corpus slice, vocabulary and priors for one training configuration.
pub struct TrainData {
    pub languages: Vec<String>,
    /// Training pools in language order.
    pub train: Vec<Vec<Utterance>>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
    pub vocab: Vocabulary,
    pub priors: ClassPriors,
}

impl TrainData {
    pub fn prepare(cfg: &TrainConfig, corpus: &Corpus) -> Result<Self> {
        let languages = cfg.active_languages();
        let keep = |u: &&Utterance| languages.contains(&u.lang);
        let train: Vec<Vec<Utterance>> = languages
            .iter()
            .map(|l| corpus.train.iter().filter(|u| &u.lang == l).cloned().collect())
            .collect();
        if let Some((l, _)) = languages.iter().zip(&train).find(|(_, p)| p.is_empty()) {
            return Err(CliError::Data(format!("no training utterances for {l}")));
        }
        let vocab = Vocabulary::build(train.iter().flatten().map(|u| u.text.as_str()), cfg.vocab.min_count)?;
        let targets: Vec<Vec<usize>> = train
            .iter()
            .flatten()
            .map(|u| {
                let mut t = vocab.encode(&u.text);
                t.push(vocab.eos());
                t
            })
            .collect();
        let priors = ClassPriors::estimate(targets.iter().map(Vec::as_slice), vocab.model_size())?;
        Ok(Self {
            train,
            valid: corpus.valid.iter().filter(keep).cloned().collect(),
            test: corpus.test.iter().filter(keep).cloned().collect(),
            vocab,
            priors,
            languages,
        })
    }

    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(CliError::Config(format!("cannot evaluate on split {other:?}; use valid or test"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub ctc: f64,
    pub attention: f64,
    /// Utterances whose CTC target did not fit in the encoder frames.
    pub ctc_skipped: usize,
}

/// Mean over the batch of the per-utterance multi-task loss. CTC and
/// attention terms are both summed over the utterance's tokens.
/// `decoder_in` replaces the batch's teacher-forcing inputs when given.
pub fn batch_loss<'t>(
    model: &SpeechTransformer,
    bd: &Binder<'t, '_>,
    batch: &Batch,
    loss: &LossConfig,
    log_pi: Option<&[f64]>,
    decoder_in: Option<&[Vec<usize>]>,
) -> Result<(Var<'t>, LossParts)> {
    let tape = bd.tape();
    let blank = model.blank();
    let mut total: Option<Var<'t>> = None;
    let mut parts = LossParts::default();
    let b = batch.len() as f64;
    for i in 0..batch.len() {
        let lang = batch.langs[i].as_str();
        let frames = batch.frame_lens[i];
        let feats = tape.constant(batch.feats[i].slice_rows(0, frames));
        let enc = model.encode(bd, feats, frames, lang)?;
        let ctc_lp = model.ctc_logits(bd, &enc)?.log_softmax()?;
        let ctc = ctc_loss(ctc_lp, &batch.tokens[i], blank)?;

        let tl = batch.target_lens[i];
        let din = &decoder_in.unwrap_or(&batch.decoder_in)[i][..tl];
        let mut logits = model.decoder_logits(bd, Some(&enc), din, lang)?;
        if let (Some(lp), true) = (log_pi, loss.tau > 0.0) {
            logits = adjust_logits_var(logits, lp, loss.tau)?;
        }
        let att = attention_loss_sum(logits, &batch.decoder_out[i][..tl], loss.label_smoothing, loss.kl_direction)?;
        parts.attention += att.item() / b;
        let utt = match ctc {
            Some(c) => {
                parts.ctc += c.item() / b;
                mtl_loss(c, att, loss.lambda)?
            }
            None => {
                parts.ctc_skipped += 1;
                att.scale(1.0 - loss.lambda)
            }
        };
        total = Some(match total {
            Some(t) => t.add(utt)?,
            None => utt,
        });
    }
    let total = total.expect("non-empty batch").scale(1.0 / b);
    parts.total = total.item();
    Ok((total, parts))
}

/// Teacher-forcing inputs where each position after `<sos>` is replaced by
/// the model's previous-step argmax with probability `p`.
pub fn scheduled_inputs(model: &SpeechTransformer, batch: &Batch, p: f64, seed: u64, step: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = stream_rng(seed, SCHEDULED_SAMPLING_DOMAIN + step);
    let was_training = model.is_training();
    model.set_training(false);
    let mut out = batch.decoder_in.clone();
    for (i, din) in out.iter_mut().enumerate() {
        let tl = batch.target_lens[i];
        let lang = batch.langs[i].as_str();
        let h = model.encode_tensor(&batch.feats[i].slice_rows(0, batch.frame_lens[i]), lang)?;
        let logits = model.decoder_logits_tensor(Some(&h), &din[..tl], lang)?;
        for t in 1..tl {
            din[t] = scheduled_sample(logits.row_slice(t - 1), din[t], p, &mut rng);
        }
    }
    model.set_training(was_training);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LedgerRecord {
    Step {
        step: u64,
        epoch: usize,
        lr: f64,
        /// Global gradient norm before clipping.
        grad_norm: f64,
        clipped_norm: f64,
        #[serde(flatten)]
        loss: LossParts,
    },
    Epoch {
        epoch: usize,
        steps: u64,
        train_loss: f64,
        valid_loss: f64,
        valid_cer: f64,
        valid_macro_cer: f64,
    },
}

pub struct TrainOutcome {
    pub model: SpeechTransformer,
    pub final_checkpoint: PathBuf,
    pub averaged_checkpoint: PathBuf,
    pub optimizer_steps: u64,
    pub epochs: Vec<LedgerRecord>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.json";
pub const PRIORS_FILE: &str = "priors.json";
pub const LEDGER_FILE: &str = "ledger.jsonl";
pub const TIMING_FILE: &str = "timing.jsonl";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const AVERAGED_CKPT: &str = "averaged.ckpt";

fn append_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Builds a fresh recognizer for `data`, with LM transfer when configured.
pub fn initial_model(cfg: &TrainConfig, data: &TrainData, lm: Option<&PretrainedLm>) -> Result<SpeechTransformer> {
    let mut model = SpeechTransformer::new(&cfg.model, data.vocab.model_size(), &data.languages, cfg.seed)?;
    if cfg.lm.enabled {
        let lm = lm.ok_or_else(|| CliError::Config("lm.enabled is set but no pretrained LM was supplied".into()))?;
        let map = build_vocab_map(&lm.vocab, &data.vocab);
        let report = transfer_parameters(&lm.model, &mut model, &map, cfg.lm.freeze)?;
        log::info!(
            "transferred {} tensors and {} token rows from the LM (coverage {:.1}%)",
            report.tensors_copied,
            report.tokens_copied,
            100.0 * map.coverage
        );
    }
    Ok(model)
}

/// Runs the full training schedule and writes config, vocabulary, priors,
/// ledger, timing and checkpoints into `run_dir`.
pub fn train(cfg: &TrainConfig, data: &TrainData, lm: Option<&PretrainedLm>, run_dir: &Path) -> Result<TrainOutcome> {
    with_precision(cfg.train.precision, || train_at_precision(cfg, data, lm, run_dir))
}

fn train_at_precision(
    cfg: &TrainConfig,
    data: &TrainData,
    lm: Option<&PretrainedLm>,
    run_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    fs::create_dir_all(run_dir.join("checkpoints"))?;
    fs::write(run_dir.join(CONFIG_FILE), cfg.to_toml())?;
    fs::write(run_dir.join(VOCAB_FILE), serde_json::to_string(&data.vocab)?)?;
    data.priors.save(&run_dir.join(PRIORS_FILE))?;
    for f in [LEDGER_FILE, TIMING_FILE] {
        File::create(run_dir.join(f))?;
    }

    let mut model = initial_model(cfg, data, lm)?;
    let log_pi = data.priors.log_pi();
    let t = &cfg.train;
    let sampler = SamplerRegistry::default().build(
        &t.sampler,
        &SamplerParams {
            pool_sizes: data.train.iter().map(Vec::len).collect(),
            batch_size: t.batch_size,
            per_language: t.per_language,
            seed: cfg.seed,
        },
    )?;
    let per_epoch = sampler.steps_per_epoch();
    let schedule = cfg.loss.schedule(t.epochs);
    let mut adam = Adam::new(&model.store, &cfg.optim);
    let mut acc = GradAccumulator::default();
    let mut pending = LossParts::default();
    let mut micro: u64 = 0;
    let mut opt_steps: u64 = 0;
    let mut kept: VecDeque<PathBuf> = VecDeque::new();
    let mut epochs = Vec::new();
    let config_echo = serde_json::to_value(cfg)?;
    log::info!(
        "training {} parameters, {per_epoch} batches per epoch, sampler {}",
        model.count_parameters(),
        sampler.name()
    );

    for epoch in 0..t.epochs {
        let started = Instant::now();
        let mut records = Vec::new();
        let mut epoch_loss = 0.0;
        model.set_training(true);
        for k in 0..per_epoch {
            let picks = sampler.batch(micro);
            let utts: Vec<&Utterance> = picks.iter().map(|&(l, i)| &data.train[l][i]).collect();
            let batch = Batch::assemble(&utts, &data.vocab)?;
            let p = schedule.prob(epoch as f64 + k as f64 / per_epoch as f64);
            let mixed = if p > 0.0 {
                Some(scheduled_inputs(&model, &batch, p, cfg.seed, micro)?)
            } else {
                None
            };
            let tape = Tape::new();
            let bd = Binder::new(&tape, &model.store);
            let (loss, parts) = batch_loss(&model, &bd, &batch, &cfg.loss, Some(&log_pi), mixed.as_deref())?;
            if !parts.total.is_finite() {
                let dump = run_dir.join("nonfinite_batch.json");
                fs::write(
                    &dump,
                    serde_json::to_string_pretty(&serde_json::json!({
                        "step": micro, "epoch": epoch, "utterances": batch.utt_ids, "loss": format!("{:?}", parts),
                    }))?,
                )?;
                return Err(CliError::NonFinite {
                    step: micro,
                    batch: batch.utt_ids.join(","),
                    dump: dump.display().to_string(),
                });
            }
            let grads = tape.backward(loss).map_err(a2_core::Error::from)?;
            acc.add(bd.collect(&grads));
            drop(bd);
            micro += 1;
            epoch_loss += parts.total;
            pending.total += parts.total;
            pending.ctc += parts.ctc;
            pending.attention += parts.attention;
            pending.ctc_skipped += parts.ctc_skipped;

            if acc.count() == cfg.optim.accum_steps {
                let n = acc.count() as f64;
                let mut g = acc.take_mean();
                let grad_norm = clip_global_norm(&mut g, cfg.optim.grad_clip);
                let clipped_norm = global_norm(&g);
                opt_steps += 1;
                let lr = noam_lr(cfg.model.d_model, cfg.optim.warmup, cfg.optim.scale, opt_steps);
                adam.step(&mut model.store, &g, lr);
                records.push(LedgerRecord::Step {
                    step: opt_steps,
                    epoch,
                    lr,
                    grad_norm,
                    clipped_norm,
                    loss: LossParts {
                        total: pending.total / n,
                        ctc: pending.ctc / n,
                        attention: pending.attention / n,
                        ctc_skipped: pending.ctc_skipped,
                    },
                });
                pending = LossParts::default();
            }
        }
        model.set_training(false);
        let (valid_loss, report) = validate(&model, data, cfg, &log_pi)?;
        let rec = LedgerRecord::Epoch {
            epoch,
            steps: opt_steps,
            train_loss: epoch_loss / per_epoch as f64,
            valid_loss,
            valid_cer: report.micro_cer,
            valid_macro_cer: report.macro_cer,
        };
        log::info!("epoch {epoch}: train {:.4} valid {valid_loss:.4} cer {:.4}", epoch_loss / per_epoch as f64, report.micro_cer);
        records.push(rec.clone());
        epochs.push(rec);
        append_jsonl(&run_dir.join(LEDGER_FILE), &records)?;

        if (epoch + 1) % t.checkpoint_every == 0 || epoch + 1 == t.epochs {
            let path = run_dir.join("checkpoints").join(format!("epoch-{:03}.ckpt", epoch + 1));
            Checkpoint::from_store(&model.store, config_echo.clone()).save(&path)?;
            kept.push_back(path);
            while kept.len() > t.keep_last {
                let old = kept.pop_front().expect("non-empty");
                fs::remove_file(old)?;
            }
        }
        append_jsonl(
            &run_dir.join(TIMING_FILE),
            &[serde_json::json!({"epoch": epoch, "seconds": started.elapsed().as_secs_f64()})],
        )?;
    }

    let final_checkpoint = run_dir.join(FINAL_CKPT);
    Checkpoint::from_store(&model.store, config_echo).save(&final_checkpoint)?;
    let recent: Vec<Checkpoint> = kept
        .iter()
        .rev()
        .take(t.average_last)
        .map(|p| Checkpoint::load(p))
        .collect::<a2_core::Result<_>>()?;
    let averaged = average_checkpoints(&recent)?;
    let averaged_checkpoint = run_dir.join(AVERAGED_CKPT);
    averaged.save(&averaged_checkpoint)?;
    averaged.restore_into(&mut model.store)?;
    Ok(TrainOutcome {
        model,
        final_checkpoint,
        averaged_checkpoint,
        optimizer_steps: opt_steps,
        epochs,
    })
}

/// Teacher-forced loss (without adjustment or scheduled sampling) and
/// decoding report on the validation subset.
fn validate(model: &SpeechTransformer, data: &TrainData, cfg: &TrainConfig, log_pi: &[f64]) -> Result<(f64, Report)> {
    let cap = cfg.train.valid_per_language;
    let mut seen = std::collections::BTreeMap::<&str, usize>::new();
    let utts: Vec<&Utterance> = data
        .valid
        .iter()
        .filter(|u| {
            let n = seen.entry(u.lang.as_str()).or_default();
            *n += 1;
            cap == 0 || *n <= cap
        })
        .collect();
    if utts.is_empty() {
        return Err(CliError::Data("validation split is empty".into()));
    }
    let plain = LossConfig {
        tau: 0.0,
        ..cfg.loss.clone()
    };
    let mut loss = 0.0;
    for chunk in utts.chunks(cfg.train.batch_size) {
        let batch = Batch::assemble(chunk, &data.vocab)?;
        let tape = Tape::no_grad();
        let bd = Binder::new(&tape, &model.store);
        let (_, parts) = batch_loss(model, &bd, &batch, &plain, None, None)?;
        loss += parts.total * chunk.len() as f64;
    }
    let dcfg = DecodeConfig {
        beam: cfg.train.valid_beam,
        ..cfg.decode.clone()
    };
    let owned: Vec<Utterance> = utts.iter().map(|u| (*u).clone()).collect();
    let results = decode_utterances(model, &data.vocab, &owned, &dcfg, Some(log_pi))?;
    Ok((loss / utts.len() as f64, Report::from_results(&results, &data.languages)?))
}

/// Beam-decodes each utterance and scores it against its transcript.
pub fn decode_utterances(
    model: &SpeechTransformer,
    vocab: &Vocabulary,
    utts: &[Utterance],
    config: &DecodeConfig,
    log_pi: Option<&[f64]>,
) -> Result<Vec<UttResult>> {
    let mut out = Vec::with_capacity(utts.len());
    for u in utts {
        let h = model.encode_tensor(&u.frames, &u.lang)?;
        let res = beam_search(model, &h, &u.lang, config, log_pi, vocab.sos(), vocab.eos())?;
        let best = res.best();
        out.push(UttResult {
            attn_score: best.attn_score,
            ctc_score: best.ctc_score,
            hit_max_len: res.hit_max_len,
            ..UttResult::new(&u.id, &u.lang, &u.text, &vocab.decode(&best.tokens))?
        });
    }
    Ok(out)
}
