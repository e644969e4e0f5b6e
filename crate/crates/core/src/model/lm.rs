use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{stream_rng, Vocabulary};
use crate::error::{Error, Result};
use crate::layers::{causal_mask, positional_encoding, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::losses::{attention_loss_sum, KlDirection};
use crate::tensorcore::{Binder, ParamId, ParamStore, Tape, Var};

use super::speech::{embedding_table, SpeechTransformer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    pub d_model: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub layers: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            ffn_dim: 64,
            layers: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

/// Causal text-only transformer whose layers line up with the recognizer's
/// decoder minus cross-attention.
pub struct TextLM {
    pub config: LmConfig,
    pub vocab_size: usize,
    pub store: ParamStore,
    pub embed: ParamId,
    pub layers: Vec<LmLayer>,
    pub ln: LayerNorm,
    pub head: Linear,
}

impl TextLM {
    pub fn new(config: &LmConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if config.layers == 0 || config.d_model == 0 || vocab_size == 0 {
            return Err(Error::Config("language model needs layers, width and a vocabulary".into()));
        }
        let mut rng = stream_rng(seed, 0);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let embed = store.add("lm.embed", embedding_table(&mut rng, vocab_size, d));
        let mut layers = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("lm.{i}");
            layers.push(LmLayer {
                ln1: LayerNorm::new(&mut store, &format!("{p}.ln1"), d),
                self_attn: MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), d, d, config.heads, &mut rng)?,
                ln2: LayerNorm::new(&mut store, &format!("{p}.ln2"), d),
                ffn: FeedForward::new(&mut store, &format!("{p}.ffn"), d, config.ffn_dim, &mut rng),
            });
        }
        let ln = LayerNorm::new(&mut store, "lm.ln", d);
        let head = Linear::new(&mut store, "lm.head", d, vocab_size, &mut rng);
        Ok(Self {
            config: config.clone(),
            vocab_size,
            store,
            embed,
            layers,
            ln,
            head,
        })
    }

    pub fn logits<'t>(&self, bd: &Binder<'t, '_>, tokens: &[usize]) -> Result<Var<'t>> {
        if tokens.is_empty() || tokens.iter().any(|&t| t >= self.vocab_size) {
            return Err(Error::Data(format!("language model input {tokens:?} is empty or out of range")));
        }
        let l = tokens.len();
        let pe = bd.tape().constant(positional_encoding(l, self.config.d_model));
        let mut h = bd.param(self.embed).gather_rows(tokens)?.add(pe)?;
        let causal = causal_mask(l);
        for layer in &self.layers {
            let x = layer.ln1.forward(bd, h)?;
            h = h.add(layer.self_attn.forward(bd, x, x, Some(&causal))?)?;
            let x = layer.ln2.forward(bd, h)?;
            h = h.add(layer.ffn.forward(bd, x, None)?)?;
        }
        let h = self.ln.forward(bd, h)?;
        self.head.forward(bd, h)
    }

    /// Summed next-token cross-entropy of `<sos> text <eos>` and the number of predictions.
    pub fn nll<'t>(&self, bd: &Binder<'t, '_>, text: &[usize], sos: usize, eos: usize) -> Result<(Var<'t>, usize)> {
        let mut input = vec![sos];
        input.extend_from_slice(text);
        let mut target = text.to_vec();
        target.push(eos);
        let logits = self.logits(bd, &input)?;
        Ok((attention_loss_sum(logits, &target, 0.0, KlDirection::Standard)?, target.len()))
    }

    pub fn perplexity(&self, texts: &[Vec<usize>], sos: usize, eos: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0;
        for text in texts {
            let tape = Tape::no_grad();
            let bd = Binder::new(&tape, &self.store);
            let (nll, n) = self.nll(&bd, text, sos, eos)?;
            total += nll.item();
            count += n;
        }
        Ok((total / count.max(1) as f64).exp())
    }
}

/// Teacher-forced text perplexity of the recognizer's decoder with
/// cross-attention skipped.
pub fn decoder_text_perplexity(model: &SpeechTransformer, texts: &[Vec<usize>], sos: usize, eos: usize, lang: &str) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0;
    for text in texts {
        let tape = Tape::no_grad();
        let bd = Binder::new(&tape, &model.store);
        let mut input = vec![sos];
        input.extend_from_slice(text);
        let mut target = text.clone();
        target.push(eos);
        let logits = model.decoder_logits(&bd, None, &input, lang)?;
        total += attention_loss_sum(logits, &target, 0.0, KlDirection::Standard)?.item();
        count += target.len();
    }
    Ok((total / count.max(1) as f64).exp())
}

/// Recognizer token id → language-model token id for identical surface strings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabMap {
    pub matched: BTreeMap<usize, usize>,
    pub unmatched: Vec<usize>,
    /// Percentage of the recognizer's regular tokens found in the LM vocabulary.
    pub coverage: f64,
}

pub fn build_vocab_map(lm: &Vocabulary, asr: &Vocabulary) -> VocabMap {
    let mut matched = BTreeMap::new();
    let mut unmatched = Vec::new();
    for (id, tok) in asr.tokens().iter().enumerate() {
        match lm.id(tok) {
            Some(lm_id) => {
                matched.insert(id, lm_id);
            }
            None => unmatched.push(id),
        }
    }
    let regular = asr.num_regular();
    let hits = (0..regular).filter(|i| matched.contains_key(i)).count();
    VocabMap {
        matched,
        unmatched,
        coverage: if regular == 0 { 0.0 } else { 100.0 * hits as f64 / regular as f64 },
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    pub tokens_copied: usize,
    pub tensors_copied: usize,
}

fn copy_tensor(dst: &mut ParamStore, to: ParamId, src: &ParamStore, from: ParamId, freeze: bool, n: &mut usize) -> Result<()> {
    if dst.get(to).shape() != src.get(from).shape() {
        return Err(Error::Config(format!(
            "cannot copy {} {:?} into {} {:?}",
            src.name(from),
            src.get(from).shape(),
            dst.name(to),
            dst.get(to).shape()
        )));
    }
    *dst.get_mut(to) = src.get(from).clone();
    dst.set_frozen(to, freeze);
    *n += 1;
    Ok(())
}

fn copy_linear(dst: &mut ParamStore, to: &Linear, src: &ParamStore, from: &Linear, freeze: bool, n: &mut usize) -> Result<()> {
    copy_tensor(dst, to.w, src, from.w, freeze, n)?;
    copy_tensor(dst, to.b, src, from.b, freeze, n)
}

fn copy_ln(dst: &mut ParamStore, to: &LayerNorm, src: &ParamStore, from: &LayerNorm, freeze: bool, n: &mut usize) -> Result<()> {
    copy_tensor(dst, to.gamma, src, from.gamma, freeze, n)?;
    copy_tensor(dst, to.beta, src, from.beta, freeze, n)
}

/// Copies the LM's matched embedding rows, self-attention, feed-forward and
/// layer norms into the decoder, plus the LM head columns of matched tokens
/// into the output projection. Cross-attention, unmatched rows and the
/// encoder keep their own values. With `freeze`, fully copied tensors stop
/// receiving updates.
pub fn transfer_parameters(lm: &TextLM, model: &mut SpeechTransformer, map: &VocabMap, freeze: bool) -> Result<TransferReport> {
    let dd = model.config.decoder_dim();
    if lm.config.d_model != dd || lm.config.heads != model.config.heads || lm.config.ffn_dim != model.config.ffn_dim {
        return Err(Error::Config(format!(
            "language model (width {}, {} heads, ffn {}) does not fit the decoder (width {dd}, {} heads, ffn {})",
            lm.config.d_model, lm.config.heads, lm.config.ffn_dim, model.config.heads, model.config.ffn_dim
        )));
    }
    if lm.layers.len() < model.decoder.len() {
        return Err(Error::Config(format!(
            "language model has {} layers, decoder needs {}",
            lm.layers.len(),
            model.decoder.len()
        )));
    }
    let mut report = TransferReport::default();
    let src = &lm.store;
    let n = &mut report.tensors_copied;
    let layers = model.decoder.clone();
    for (dec, lml) in layers.iter().zip(&lm.layers) {
        let dst = &mut model.store;
        copy_ln(dst, &dec.ln1, src, &lml.ln1, freeze, n)?;
        for (to, from) in [
            (&dec.self_attn.q, &lml.self_attn.q),
            (&dec.self_attn.k, &lml.self_attn.k),
            (&dec.self_attn.v, &lml.self_attn.v),
            (&dec.self_attn.o, &lml.self_attn.o),
            (&dec.ffn.l1, &lml.ffn.l1),
            (&dec.ffn.l2, &lml.ffn.l2),
        ] {
            copy_linear(dst, to, src, from, freeze, n)?;
        }
        copy_ln(dst, &dec.ln3, src, &lml.ln2, freeze, n)?;
    }
    let (dec_ln, out, embed) = (model.decoder_ln.clone(), model.out_proj.clone(), model.embed);
    copy_ln(&mut model.store, &dec_ln, src, &lm.ln, freeze, n)?;

    let lm_embed = src.get(lm.embed).clone();
    let lm_w = src.get(lm.head.w).clone();
    let lm_b = src.get(lm.head.b).clone();
    let v = model.vocab_size;
    for (&asr_id, &lm_id) in map.matched.iter().filter(|(&a, &l)| a < v && l < lm.vocab_size) {
        model.store.get_mut(embed).row_slice_mut(asr_id).copy_from_slice(lm_embed.row_slice(lm_id));
        let w = model.store.get_mut(out.w);
        for r in 0..dd {
            w.row_slice_mut(r)[asr_id] = lm_w.get2(r, lm_id);
        }
        model.store.get_mut(out.b).data_mut()[asr_id] = lm_b.data()[lm_id];
        report.tokens_copied += 1;
    }
    Ok(report)
}
