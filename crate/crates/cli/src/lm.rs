//! Text-only LM pretraining on synthetic sentences, the source of decoder transfer.

use std::fs;
use std::path::Path;

use a2_core::data::{generate_text, permutation, Vocabulary};
use a2_core::model::{Checkpoint, TextLM};
use a2_core::tensorcore::{Binder, Tape, Var};

use crate::config::{hash_str, TrainConfig};
use crate::error::{CliError, Result};
use crate::optim::{clip_global_norm, noam_lr, Adam, OptimConfig};

pub const LM_CKPT: &str = "lm.ckpt";
pub const LM_VOCAB: &str = "lm_vocab.json";
const LM_SHUFFLE_DOMAIN: u64 = 5 << 40;

pub struct PretrainedLm {
    pub model: TextLM,
    pub vocab: Vocabulary,
    /// Per-epoch mean next-token loss.
    pub losses: Vec<f64>,
}

/// Cache key: the corpus spec, the LM section (minus transfer switches) and the seed.
pub fn lm_key(cfg: &TrainConfig) -> String {
    let lm = serde_json::json!({
        "corpus": cfg.corpus,
        "model": cfg.lm.model,
        "sentences_per_language": cfg.lm.sentences_per_language,
        "epochs": cfg.lm.epochs,
        "batch_size": cfg.lm.batch_size,
        "warmup": cfg.lm.warmup,
        "scale": cfg.lm.scale,
        "optim": cfg.optim,
        "seed": cfg.seed,
    });
    hash_str(&lm.to_string())
}

pub fn pretrain_lm(cfg: &TrainConfig) -> Result<PretrainedLm> {
    let sentences = generate_text(&cfg.corpus, cfg.lm.sentences_per_language)?;
    let vocab = Vocabulary::build(sentences.iter().map(|(_, t)| t.as_str()), 1)?;
    let texts: Vec<Vec<usize>> = sentences.iter().map(|(_, t)| vocab.encode(t)).collect();
    let mut model = TextLM::new(&cfg.lm.model, vocab.model_size(), cfg.seed)?;
    let optim = OptimConfig {
        warmup: cfg.lm.warmup,
        scale: cfg.lm.scale,
        ..cfg.optim.clone()
    };
    let mut adam = Adam::new(&model.store, &optim);
    let (sos, eos) = (vocab.sos(), vocab.eos());
    let mut step = 0;
    let mut losses = Vec::new();
    for epoch in 0..cfg.lm.epochs {
        let order = permutation(texts.len(), cfg.seed, LM_SHUFFLE_DOMAIN + epoch as u64);
        let mut total = 0.0;
        let mut count = 0;
        for chunk in order.chunks(cfg.lm.batch_size) {
            let tape = Tape::new();
            let bd = Binder::new(&tape, &model.store);
            let mut sum: Option<Var> = None;
            let mut n = 0;
            for &i in chunk {
                let (nll, k) = model.nll(&bd, &texts[i], sos, eos)?;
                n += k;
                sum = Some(match sum {
                    Some(s) => s.add(nll)?,
                    None => nll,
                });
            }
            let loss = sum.expect("non-empty chunk").scale(1.0 / n as f64);
            if !loss.item().is_finite() {
                return Err(CliError::Data(format!("non-finite LM loss at step {step}")));
            }
            total += loss.item() * n as f64;
            count += n;
            let grads = tape.backward(loss)?;
            let mut g = bd.collect(&grads);
            drop(bd);
            clip_global_norm(&mut g, optim.grad_clip);
            step += 1;
            adam.step(&mut model.store, &g, noam_lr(cfg.lm.model.d_model, optim.warmup, optim.scale, step));
        }
        losses.push(total / count as f64);
        log::info!("lm epoch {epoch}: loss {:.4}", total / count as f64);
    }
    Ok(PretrainedLm { model, vocab, losses })
}

pub fn save_lm(lm: &PretrainedLm, dir: &Path, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(LM_VOCAB), serde_json::to_string(&lm.vocab)?)?;
    let echo = serde_json::json!({"lm": cfg.lm.model, "losses": lm.losses});
    Checkpoint::from_store(&lm.model.store, echo).save(&dir.join(LM_CKPT))?;
    Ok(())
}

pub fn load_lm(dir: &Path, cfg: &TrainConfig) -> Result<PretrainedLm> {
    let vocab: Vocabulary = serde_json::from_str(&fs::read_to_string(dir.join(LM_VOCAB))?)?;
    let mut model = TextLM::new(&cfg.lm.model, vocab.model_size(), cfg.seed)?;
    let ck = Checkpoint::load(&dir.join(LM_CKPT))?;
    ck.restore_into(&mut model.store)?;
    let losses = serde_json::from_value(ck.header.config["losses"].clone()).unwrap_or_default();
    Ok(PretrainedLm { model, vocab, losses })
}

/// Loads the cached LM under `root`, pretraining and caching it on a miss.
pub fn ensure_lm(root: &Path, cfg: &TrainConfig) -> Result<PretrainedLm> {
    let dir = root.join(format!("lm-{}", lm_key(cfg)));
    if dir.join(LM_CKPT).exists() && dir.join(LM_VOCAB).exists() {
        return load_lm(&dir, cfg);
    }
    let lm = pretrain_lm(cfg)?;
    save_lm(&lm, &dir, cfg)?;
    Ok(lm)
}
