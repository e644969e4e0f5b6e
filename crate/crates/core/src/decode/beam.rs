use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::adjust_logits;
use crate::model::{DecoderState, SpeechTransformer};
use crate::tensorcore::Tensor;

use super::prefix::{CtcPrefixScorer, CtcPrefixState};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeConfig {
    pub beam: usize,
    /// Weight of the CTC prefix score against the attention score.
    pub ctc_weight: f64,
    /// Prior adjustment of attention logits at inference; 0 disables it.
    pub tau: f64,
    /// Maximum number of output tokens; 0 means the encoder length.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            beam: 4,
            ctc_weight: 0.5,
            tau: 0.0,
            max_len: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("decode: beam must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(Error::Config(format!("decode: ctc_weight {} outside [0, 1]", self.ctc_weight)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("decode: tau {} must be non-negative", self.tau)));
        }
        Ok(())
    }

    /// `β·ctc + (1−β)·attention`, skipping a term whose weight is zero.
    pub fn combine(&self, ctc: f64, attn: f64) -> f64 {
        if self.ctc_weight == 0.0 {
            attn
        } else if self.ctc_weight == 1.0 {
            ctc
        } else {
            self.ctc_weight * ctc + (1.0 - self.ctc_weight) * attn
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Output tokens without `<sos>` and `<eos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
    pub attn_score: f64,
    pub ctc_score: f64,
    /// Closed by the length cap rather than by choosing `<eos>` early.
    pub capped: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamResult {
    /// Best first.
    pub hypotheses: Vec<Hypothesis>,
    /// Every returned hypothesis was closed by the length cap.
    pub hit_max_len: bool,
}

impl BeamResult {
    pub fn best(&self) -> &Hypothesis {
        &self.hypotheses[0]
    }
}

struct Live {
    tokens: Vec<usize>,
    attn: f64,
    ctc: CtcPrefixState,
    score: f64,
    dec: DecoderState,
}

/// Higher score first; ties go to the shorter, then lexicographically smaller sequence.
fn rank(a_score: f64, a: &[usize], b_score: f64, b: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then(a.len().cmp(&b.len())).then(a.cmp(b))
}

/// Joint CTC/attention beam search for one utterance.
///
/// Every live hypothesis is also closed with `<eos>` at each step, so closed
/// hypotheses never compete with live ones for beam slots. At the length cap
/// all surviving extensions are closed without pruning. Search stops early
/// once `beam` closed hypotheses all score at least as well as the best live
/// one; extending a hypothesis can only lower its score.
pub fn beam_search(
    model: &SpeechTransformer,
    h_enc: &Tensor,
    lang: &str,
    config: &DecodeConfig,
    log_priors: Option<&[f64]>,
    sos: usize,
    eos: usize,
) -> Result<BeamResult> {
    config.validate()?;
    if h_enc.rows() == 0 {
        return Err(Error::Data("cannot decode an empty encoder output".into()));
    }
    let v = model.vocab_size;
    if sos >= v || eos >= v {
        return Err(Error::Config(format!("sos {sos} / eos {eos} outside decoder vocabulary of {v}")));
    }
    let adjust = match log_priors {
        Some(lp) if config.tau != 0.0 => {
            if lp.len() != v {
                return Err(Error::Dimension(format!("{} priors for {v} decoder classes", lp.len())));
            }
            Some(lp)
        }
        _ => None,
    };
    let ctc_lp = model.ctc_log_probs_tensor(h_enc)?;
    let scorer = CtcPrefixScorer::new(&ctc_lp, model.blank());
    let memory = model.decoder_memory(h_enc)?;
    let max_len = if config.max_len == 0 { h_enc.rows() } else { config.max_len };
    let expandable: Vec<usize> = (0..v).filter(|&c| c != sos && c != eos).collect();

    let mut live = vec![Live {
        tokens: Vec::new(),
        attn: 0.0,
        ctc: scorer.initial(),
        score: 0.0,
        dec: model.decoder_state(),
    }];
    let mut closed: Vec<Hypothesis> = Vec::new();

    for depth in 0..=max_len {
        let mut candidates: Vec<(usize, usize, f64, CtcPrefixState, f64)> = Vec::new();
        let mut next_states = Vec::with_capacity(live.len());
        for (hi, hyp) in live.iter().enumerate() {
            let prev = hyp.tokens.last().copied().unwrap_or(sos);
            let mut dec = hyp.dec.clone();
            let logits = model.decode_step(&memory, &mut dec, prev, lang)?;
            next_states.push(dec);
            let logits = match adjust {
                Some(lp) => adjust_logits(&logits, lp, config.tau)?,
                None => logits,
            };
            let logp = Tensor::row(&logits).log_softmax_rows()?.into_data();

            let attn = hyp.attn + logp[eos];
            let ctc = scorer.finalize(&hyp.ctc);
            closed.push(Hypothesis {
                tokens: hyp.tokens.clone(),
                score: config.combine(ctc, attn),
                attn_score: attn,
                ctc_score: ctc,
                capped: depth == max_len,
            });
            if depth == max_len {
                continue;
            }
            for &c in &expandable {
                let attn = hyp.attn + logp[c];
                let state = if config.ctc_weight == 0.0 {
                    hyp.ctc.clone()
                } else {
                    scorer.extend(&hyp.ctc, c)
                };
                let score = config.combine(state.score, attn);
                candidates.push((hi, c, attn, state, score));
            }
        }
        if depth == max_len || candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| {
            let ta = [live[a.0].tokens.as_slice(), &[a.1]].concat();
            let tb = [live[b.0].tokens.as_slice(), &[b.1]].concat();
            rank(a.4, &ta, b.4, &tb)
        });
        if depth + 1 < max_len {
            candidates.truncate(config.beam);
        }
        live = candidates
            .into_iter()
            .map(|(hi, c, attn, ctc, score)| {
                let mut tokens = live[hi].tokens.clone();
                tokens.push(c);
                Live {
                    tokens,
                    attn,
                    ctc,
                    score,
                    dec: next_states[hi].clone(),
                }
            })
            .collect();

        closed.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
        let best_live = live.iter().map(|h| h.score).fold(f64::NEG_INFINITY, f64::max);
        if closed.len() >= config.beam && closed[config.beam - 1].score >= best_live {
            break;
        }
    }
    closed.sort_by(|a, b| rank(a.score, &a.tokens, b.score, &b.tokens));
    closed.truncate(config.beam);
    let hit_max_len = closed.iter().all(|h| h.capped);
    if hit_max_len {
        log::debug!("no hypothesis chose <eos> before the {max_len}-token cap");
    }
    Ok(BeamResult {
        hypotheses: closed,
        hit_max_len,
    })
}

/// Encodes `feats` and runs [`beam_search`].
pub fn decode_utterance(
    model: &SpeechTransformer,
    feats: &Tensor,
    lang: &str,
    config: &DecodeConfig,
    log_priors: Option<&[f64]>,
    sos: usize,
    eos: usize,
) -> Result<BeamResult> {
    let h = model.encode_tensor(feats, lang)?;
    beam_search(model, &h, lang, config, log_priors, sos, eos)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ctc_loss_value;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    // Decoder classes: a=0, <unk>=1, <sos>=2, <eos>=3; CTC blank is 4.
    const SOS: usize = 2;
    const EOS: usize = 3;

    fn model(seed: u64) -> SpeechTransformer {
        let cfg = ModelConfig {
            feat_dim: 3,
            stack: 1,
            d_model: 8,
            heads: 2,
            ffn_dim: 12,
            encoder_layers: 1,
            decoder_layers: 1,
            ..ModelConfig::default()
        };
        let mut m = SpeechTransformer::new(&cfg, 4, &["en".to_string()], seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 77);
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            for v in m.store.get_mut(id).data_mut() {
                *v += rng.random_range(-0.5..0.5);
            }
        }
        m
    }

    fn encoder_out(m: &SpeechTransformer, seed: u64, t: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Tensor::new(vec![t, 3], (0..t * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        m.encode_tensor(&f, "en").unwrap()
    }

    /// Scores one complete sequence with teacher forcing and the CTC forward pass.
    fn oracle_score(m: &SpeechTransformer, h: &Tensor, seq: &[usize], cfg: &DecodeConfig) -> f64 {
        let mut input = vec![SOS];
        input.extend_from_slice(seq);
        let lp = m.decoder_logits_tensor(Some(h), &input, "en").unwrap().log_softmax_rows().unwrap();
        let mut attn = 0.0;
        for (i, &y) in seq.iter().chain([EOS].iter()).enumerate() {
            attn += lp.get2(i, y);
        }
        let ctc_lp = m.ctc_log_probs_tensor(h).unwrap();
        let ctc = ctc_loss_value(&ctc_lp, seq, m.blank()).map_or(f64::NEG_INFINITY, |l| -l);
        cfg.combine(ctc, attn)
    }

    fn all_sequences(max_len: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        let mut frontier = vec![vec![]];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for s in &frontier {
                for c in [0, 1] {
                    let mut t: Vec<usize> = s.clone();
                    t.push(c);
                    next.push(t);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        out
    }

    #[test]
    fn matches_exhaustive_search() {
        for seed in 0..6 {
            let m = model(seed);
            let h = encoder_out(&m, seed + 1000, 4);
            for beta in [0.0, 0.3, 1.0] {
                let cfg = DecodeConfig {
                    beam: 4,
                    ctc_weight: beta,
                    tau: 0.0,
                    max_len: 3,
                };
                let mut brute: Vec<(f64, Vec<usize>)> =
                    all_sequences(3).into_iter().map(|s| (oracle_score(&m, &h, &s, &cfg), s)).collect();
                brute.sort_by(|a, b| rank(a.0, &a.1, b.0, &b.1));
                let got = beam_search(&m, &h, "en", &cfg, None, SOS, EOS).unwrap();
                assert_eq!(got.hypotheses.len(), 4);
                for (hyp, (score, seq)) in got.hypotheses.iter().zip(&brute) {
                    assert_eq!(&hyp.tokens, seq, "seed {seed} beta {beta}");
                    assert!((hyp.score - score).abs() < 1e-9 || hyp.score == *score);
                }
            }
        }
    }

    #[test]
    fn zero_tau_and_uniform_priors_leave_search_unchanged() {
        let m = model(3);
        let h = encoder_out(&m, 9, 5);
        let base = DecodeConfig::default();
        let plain = beam_search(&m, &h, "en", &base, None, SOS, EOS).unwrap();
        let skewed = [-0.1, -3.0, -2.0, -0.5];
        let zero = beam_search(&m, &h, "en", &base, Some(&skewed), SOS, EOS).unwrap();
        assert_eq!(plain, zero);
        let uniform = [-(4f64.ln()); 4];
        let cfg = DecodeConfig { tau: 1.7, ..base };
        let uni = beam_search(&m, &h, "en", &cfg, Some(&uniform), SOS, EOS).unwrap();
        let toks = |r: &BeamResult| r.hypotheses.iter().map(|h| h.tokens.clone()).collect::<Vec<_>>();
        assert_eq!(toks(&plain), toks(&uni));
        for (a, b) in plain.hypotheses.iter().zip(&uni.hypotheses) {
            assert!((a.score - b.score).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_config() {
        let m = model(0);
        let h = encoder_out(&m, 1, 3);
        let bad = DecodeConfig { beam: 0, ..DecodeConfig::default() };
        assert!(beam_search(&m, &h, "en", &bad, None, SOS, EOS).is_err());
        let bad = DecodeConfig { ctc_weight: 1.5, ..DecodeConfig::default() };
        assert!(beam_search(&m, &h, "en", &bad, None, SOS, EOS).is_err());
        let cfg = DecodeConfig { tau: 1.0, ..DecodeConfig::default() };
        assert!(beam_search(&m, &h, "en", &cfg, Some(&[0.0; 3]), SOS, EOS).is_err());
    }
}
