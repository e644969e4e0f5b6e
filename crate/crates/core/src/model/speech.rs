use std::cell::{Cell, RefCell};
use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::adapters::{DualAdapterBank, GroupingRegistry};
use crate::data::stream_rng;
use crate::error::{Error, Result};
use crate::layers::{
    causal_mask, key_padding_mask, positional_encoding, Dropout, FeedForward, FrontEnd, LayerNorm, Linear,
    MultiHeadAttention,
};
use crate::tensorcore::{Binder, ParamId, ParamStore, Tape, Tensor, Var};

use super::config::ModelConfig;

const BACKBONE_STREAM: u64 = 0;
const ADAPTER_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

pub(crate) fn embedding_table(rng: &mut impl Rng, rows: usize, d: usize) -> Tensor {
    let data = (0..rows * d).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(vec![rows, d], data).expect("shape matches")
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub adapters: Option<DualAdapterBank>,
    pub ln2: LayerNorm,
    pub ffn: FeedForward,
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub adapters: Option<DualAdapterBank>,
    pub ln3: LayerNorm,
    pub ffn: FeedForward,
}

/// Encoder states of one utterance; rows at and beyond `len` are padding.
#[derive(Clone, Copy)]
pub struct Encoded<'t> {
    pub h: Var<'t>,
    pub len: usize,
}

/// Hybrid CTC/attention transformer with optional dual adapters.
pub struct SpeechTransformer {
    pub config: ModelConfig,
    /// Decoder output classes (vocabulary without the blank).
    pub vocab_size: usize,
    pub languages: Vec<String>,
    pub routes: BTreeMap<String, String>,
    pub store: ParamStore,
    pub front: FrontEnd,
    pub encoder: Vec<EncoderLayer>,
    pub encoder_ln: LayerNorm,
    pub ctc_head: Linear,
    pub bridge: Option<Linear>,
    pub embed: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub decoder_ln: LayerNorm,
    pub out_proj: Linear,
    dropout: Option<Dropout>,
    training: Cell<bool>,
}

/// Cross-attention keys and values for every decoder layer, projected once per utterance.
#[derive(Clone, Debug)]
pub struct DecoderMemory {
    layers: Vec<(Tensor, Tensor)>,
    len: usize,
}

/// Self-attention cache of one hypothesis.
#[derive(Clone, Debug, Default)]
pub struct DecoderState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    pos: usize,
}

impl DecoderState {
    pub fn len(&self) -> usize {
        self.pos
    }

    pub fn is_empty(&self) -> bool {
        self.pos == 0
    }
}

impl SpeechTransformer {
    /// Backbone and adapter parameters come from separate random streams, so
    /// enabling adapters leaves every other initial weight unchanged.
    pub fn new(config: &ModelConfig, vocab_size: usize, languages: &[String], seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        let mut rng = stream_rng(seed, BACKBONE_STREAM);
        let mut adapter_rng = stream_rng(seed, ADAPTER_STREAM);
        let mut store = ParamStore::new();
        let (d, dd, h, ff) = (config.d_model, config.decoder_dim(), config.heads, config.ffn_dim);
        let ad = &config.adapters;
        let routes = if ad.enabled {
            GroupingRegistry::default().resolve(&ad.grouping, &ad.custom_groups, languages)?
        } else {
            languages.iter().map(|l| (l.clone(), l.clone())).collect()
        };

        let front = FrontEnd::new(&mut store, "enc.front", config.feat_dim, config.stack, d, &mut rng);
        let mut encoder = Vec::with_capacity(config.encoder_layers);
        for i in 0..config.encoder_layers {
            let p = format!("enc.{i}");
            let ln1 = LayerNorm::new(&mut store, &format!("{p}.ln1"), d);
            let attn = MultiHeadAttention::new(&mut store, &format!("{p}.attn"), d, d, h, &mut rng)?;
            let ln2 = LayerNorm::new(&mut store, &format!("{p}.ln2"), d);
            let ffn = FeedForward::new(&mut store, &format!("{p}.ffn"), d, ff, &mut rng);
            encoder.push(EncoderLayer { ln1, attn, adapters: None, ln2, ffn });
        }
        let encoder_ln = LayerNorm::new(&mut store, "enc.ln", d);
        let ctc_head = Linear::new(&mut store, "ctc", d, vocab_size + 1, &mut rng);
        let bridge = (dd != d).then(|| Linear::new(&mut store, "bridge", d, dd, &mut rng));
        let embed = store.add("dec.embed", embedding_table(&mut rng, vocab_size, dd));
        let mut decoder = Vec::with_capacity(config.decoder_layers);
        for i in 0..config.decoder_layers {
            let p = format!("dec.{i}");
            let ln1 = LayerNorm::new(&mut store, &format!("{p}.ln1"), dd);
            let self_attn = MultiHeadAttention::new(&mut store, &format!("{p}.self_attn"), dd, dd, h, &mut rng)?;
            let ln2 = LayerNorm::new(&mut store, &format!("{p}.ln2"), dd);
            let cross_attn = MultiHeadAttention::new(&mut store, &format!("{p}.cross_attn"), dd, dd, h, &mut rng)?;
            let ln3 = LayerNorm::new(&mut store, &format!("{p}.ln3"), dd);
            let ffn = FeedForward::new(&mut store, &format!("{p}.ffn"), dd, ff, &mut rng);
            decoder.push(DecoderLayer { ln1, self_attn, ln2, cross_attn, adapters: None, ln3, ffn });
        }
        let decoder_ln = LayerNorm::new(&mut store, "dec.ln", dd);
        let out_proj = Linear::new(&mut store, "dec.out", dd, vocab_size, &mut rng);

        if ad.enabled {
            let bank = |store: &mut ParamStore, name: String, width: usize, rng: &mut _| {
                DualAdapterBank::new(store, &name, width, ad.bottleneck, &routes, ad.common, ad.residual, rng)
            };
            if ad.placement.encoder() {
                for (i, layer) in encoder.iter_mut().enumerate() {
                    layer.adapters = Some(bank(&mut store, format!("enc.{i}.adapter"), d, &mut adapter_rng)?);
                }
            }
            if ad.placement.decoder() {
                for (i, layer) in decoder.iter_mut().enumerate() {
                    layer.adapters = Some(bank(&mut store, format!("dec.{i}.adapter"), dd, &mut adapter_rng)?);
                }
            }
        }
        let dropout = (config.dropout > 0.0).then(|| Dropout {
            rate: config.dropout,
            rng: RefCell::new(stream_rng(seed, DROPOUT_STREAM)),
        });

        Ok(Self {
            config: config.clone(),
            vocab_size,
            languages: languages.to_vec(),
            routes,
            store,
            front,
            encoder,
            encoder_ln,
            ctc_head,
            bridge,
            embed,
            decoder,
            decoder_ln,
            out_proj,
            dropout,
            training: Cell::new(false),
        })
    }

    /// Enables dropout (when configured) for subsequent taped forwards.
    pub fn set_training(&self, on: bool) {
        self.training.set(on);
    }

    pub fn is_training(&self) -> bool {
        self.training.get()
    }

    fn dropout(&self) -> Option<&Dropout> {
        self.dropout.as_ref().filter(|_| self.training.get())
    }

    pub fn blank(&self) -> usize {
        self.vocab_size
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.ids().filter(|&id| !self.store.is_frozen(id)).map(|id| self.store.get(id).len()).sum()
    }

    pub fn encoded_len(&self, frames: usize) -> usize {
        self.front.output_len(frames)
    }

    /// `feats` is `T × F`, of which the first `valid_frames` rows are real.
    pub fn encode<'t>(&self, bd: &Binder<'t, '_>, feats: Var<'t>, valid_frames: usize, lang: &str) -> Result<Encoded<'t>> {
        if valid_frames == 0 || valid_frames > feats.shape()[0] {
            return Err(Error::Data(format!(
                "{valid_frames} valid frames for a {}-frame input",
                feats.shape()[0]
            )));
        }
        let x = self.front.forward(bd, feats)?;
        let tp = x.shape()[0];
        let len = self.front.output_len(valid_frames);
        let pe = bd.tape().constant(positional_encoding(tp, self.config.d_model));
        let mut h = x.add(pe)?;
        let mask = (len < tp).then(|| key_padding_mask(tp, tp, len));
        for layer in &self.encoder {
            let x = layer.ln1.forward(bd, h)?;
            h = h.add(layer.attn.forward(bd, x, x, mask.as_ref())?)?;
            if let Some(bank) = &layer.adapters {
                h = bank.forward(bd, h, lang)?;
            }
            let x = layer.ln2.forward(bd, h)?;
            h = h.add(layer.ffn.forward(bd, x, self.dropout())?)?;
        }
        Ok(Encoded {
            h: self.encoder_ln.forward(bd, h)?,
            len,
        })
    }

    /// Per-frame logits over the vocabulary plus the blank (last class), valid frames only.
    pub fn ctc_logits<'t>(&self, bd: &Binder<'t, '_>, enc: &Encoded<'t>) -> Result<Var<'t>> {
        let h = if enc.len < enc.h.shape()[0] {
            enc.h.slice_rows(0, enc.len)
        } else {
            enc.h
        };
        self.ctc_head.forward(bd, h)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        match tokens.iter().find(|&&t| t >= self.vocab_size) {
            Some(t) => Err(Error::Data(format!("token id {t} outside decoder vocabulary of {}", self.vocab_size))),
            None if tokens.is_empty() => Err(Error::Data("decoder input is empty".into())),
            None => Ok(()),
        }
    }

    /// Teacher-forced decoder logits, one row per input token. With `memory`
    /// set to `None` the cross-attention sublayers are skipped, leaving a
    /// text-only language model.
    pub fn decoder_logits<'t>(
        &self,
        bd: &Binder<'t, '_>,
        memory: Option<&Encoded<'t>>,
        tokens: &[usize],
        lang: &str,
    ) -> Result<Var<'t>> {
        self.check_tokens(tokens)?;
        let l = tokens.len();
        let dd = self.config.decoder_dim();
        let mem = match memory {
            Some(enc) => {
                let m = match &self.bridge {
                    Some(b) => b.forward(bd, enc.h)?,
                    None => enc.h,
                };
                let tp = m.shape()[0];
                Some((m, (enc.len < tp).then(|| key_padding_mask(l, tp, enc.len))))
            }
            None => None,
        };
        let pe = bd.tape().constant(positional_encoding(l, dd));
        let mut h = bd.param(self.embed).gather_rows(tokens)?.add(pe)?;
        let causal = causal_mask(l);
        for layer in &self.decoder {
            let x = layer.ln1.forward(bd, h)?;
            h = h.add(layer.self_attn.forward(bd, x, x, Some(&causal))?)?;
            if let Some((m, mask)) = &mem {
                let x = layer.ln2.forward(bd, h)?;
                h = h.add(layer.cross_attn.forward(bd, x, *m, mask.as_ref())?)?;
            }
            if let Some(bank) = &layer.adapters {
                h = bank.forward(bd, h, lang)?;
            }
            let x = layer.ln3.forward(bd, h)?;
            h = h.add(layer.ffn.forward(bd, x, self.dropout())?)?;
        }
        let h = self.decoder_ln.forward(bd, h)?;
        self.out_proj.forward(bd, h)
    }

    /// Untaped encoder output restricted to valid rows.
    pub fn encode_tensor(&self, feats: &Tensor, lang: &str) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let bd = Binder::new(&tape, &self.store);
        let enc = self.encode(&bd, tape.leaf(feats.clone()), feats.rows(), lang)?;
        let h = enc.h.value().slice_rows(0, enc.len);
        Ok(h)
    }

    /// Untaped CTC log-probabilities for valid encoder rows.
    pub fn ctc_log_probs_tensor(&self, h_enc: &Tensor) -> Result<Tensor> {
        Ok(self.ctc_head.apply(&self.store, h_enc)?.log_softmax_rows()?)
    }

    /// Untaped teacher-forced logits given valid encoder rows.
    pub fn decoder_logits_tensor(&self, h_enc: Option<&Tensor>, tokens: &[usize], lang: &str) -> Result<Tensor> {
        let tape = Tape::no_grad();
        let bd = Binder::new(&tape, &self.store);
        let enc = h_enc.map(|h| Encoded {
            h: tape.leaf(h.clone()),
            len: h.rows(),
        });
        Ok(self.decoder_logits(&bd, enc.as_ref(), tokens, lang)?.to_tensor())
    }

    pub fn decoder_memory(&self, h_enc: &Tensor) -> Result<DecoderMemory> {
        let mem = match &self.bridge {
            Some(b) => b.apply(&self.store, h_enc)?,
            None => h_enc.clone(),
        };
        let layers = self
            .decoder
            .iter()
            .map(|l| l.cross_attn.project_kv(&self.store, &mem))
            .collect::<Result<_>>()?;
        Ok(DecoderMemory { layers, len: h_enc.rows() })
    }

    pub fn decoder_state(&self) -> DecoderState {
        DecoderState {
            keys: vec![Vec::new(); self.decoder.len()],
            values: vec![Vec::new(); self.decoder.len()],
            pos: 0,
        }
    }

    /// Feeds one token and returns the logits for the next one.
    pub fn decode_step(&self, memory: &DecoderMemory, state: &mut DecoderState, token: usize, lang: &str) -> Result<Vec<f64>> {
        self.check_tokens(&[token])?;
        let s = &self.store;
        let dd = self.config.decoder_dim();
        let emb = s.get(self.embed).row_slice(token);
        let pe = positional_encoding(state.pos + 1, dd);
        let mut h = Tensor::new(vec![1, dd], emb.iter().zip(pe.row_slice(state.pos)).map(|(a, b)| a + b).collect())?;
        let n = state.pos + 1;
        for (i, layer) in self.decoder.iter().enumerate() {
            let x = layer.ln1.apply(s, &h);
            let (k, v) = layer.self_attn.project_kv(s, &x)?;
            state.keys[i].extend_from_slice(k.data());
            state.values[i].extend_from_slice(v.data());
            let keys = Tensor::new(vec![n, dd], state.keys[i].clone())?;
            let values = Tensor::new(vec![n, dd], state.values[i].clone())?;
            h = h.add(&layer.self_attn.attend_row(s, &x, &keys, &values, n)?)?;
            let x = layer.ln2.apply(s, &h);
            let (mk, mv) = &memory.layers[i];
            h = h.add(&layer.cross_attn.attend_row(s, &x, mk, mv, memory.len)?)?;
            if let Some(bank) = &layer.adapters {
                h = bank.apply(s, &h, lang)?;
            }
            let x = layer.ln3.apply(s, &h);
            h = h.add(&layer.ffn.apply(s, &x)?)?;
        }
        state.pos = n;
        let h = self.decoder_ln.apply(s, &h);
        Ok(self.out_proj.apply(s, &h)?.into_data())
    }
}
