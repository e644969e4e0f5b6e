use crate::adapters::{make_language_mask, LanguageMask};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

use super::corpus::Utterance;
use super::vocab::Vocabulary;

/// Marks padded decoder-target positions.
pub const IGNORE: usize = usize::MAX;

/// Utterances padded to a common frame count and target length.
#[derive(Clone, Debug)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    pub langs: Vec<String>,
    /// One `max_frames × F` matrix per utterance, zero-padded.
    pub feats: Vec<Tensor>,
    pub frame_lens: Vec<usize>,
    /// Bare token ids (CTC targets).
    pub tokens: Vec<Vec<usize>>,
    /// `<sos>` followed by the tokens, padded with `<eos>`.
    pub decoder_in: Vec<Vec<usize>>,
    /// Tokens followed by `<eos>`, padded with [`IGNORE`].
    pub decoder_out: Vec<Vec<usize>>,
    pub target_lens: Vec<usize>,
}

impl Batch {
    pub fn assemble(utts: &[&Utterance], vocab: &Vocabulary) -> Result<Self> {
        if utts.is_empty() {
            return Err(Error::Contract("cannot assemble an empty batch".into()));
        }
        let feat_dim = utts[0].frames.cols();
        let max_frames = utts.iter().map(|u| u.frames.rows()).max().unwrap_or(0);
        let tokens: Vec<Vec<usize>> = utts.iter().map(|u| vocab.encode(&u.text)).collect();
        let max_tgt = tokens.iter().map(|t| t.len() + 1).max().unwrap_or(1);
        let mut batch = Self {
            utt_ids: Vec::new(),
            langs: Vec::new(),
            feats: Vec::new(),
            frame_lens: Vec::new(),
            tokens: Vec::new(),
            decoder_in: Vec::new(),
            decoder_out: Vec::new(),
            target_lens: Vec::new(),
        };
        for (u, toks) in utts.iter().zip(tokens) {
            if u.frames.cols() != feat_dim {
                return Err(Error::Dimension(format!(
                    "utterance {} has feature dim {}, batch uses {feat_dim}",
                    u.id,
                    u.frames.cols()
                )));
            }
            let mut feats = Tensor::zeros(&[max_frames, feat_dim]);
            feats.data_mut()[..u.frames.len()].copy_from_slice(u.frames.data());
            let mut din = vec![vocab.sos()];
            din.extend(&toks);
            din.resize(max_tgt, vocab.eos());
            let mut dout = toks.clone();
            dout.push(vocab.eos());
            dout.resize(max_tgt, IGNORE);
            batch.utt_ids.push(u.id.clone());
            batch.langs.push(u.lang.clone());
            batch.feats.push(feats);
            batch.frame_lens.push(u.frames.rows());
            batch.target_lens.push(toks.len() + 1);
            batch.tokens.push(toks);
            batch.decoder_in.push(din);
            batch.decoder_out.push(dout);
        }
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.utt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utt_ids.is_empty()
    }

    pub fn max_frames(&self) -> usize {
        self.feats.first().map_or(0, Tensor::rows)
    }

    pub fn max_target(&self) -> usize {
        self.decoder_in.first().map_or(0, Vec::len)
    }

    /// `true` at real (non-padded) frame positions of utterance `i`.
    pub fn frame_mask(&self, i: usize) -> Vec<bool> {
        (0..self.max_frames()).map(|t| t < self.frame_lens[i]).collect()
    }

    pub fn target_mask(&self, i: usize) -> Vec<bool> {
        (0..self.max_target()).map(|t| t < self.target_lens[i]).collect()
    }

    pub fn language_mask(&self, routes: &std::collections::BTreeMap<String, String>) -> Result<LanguageMask> {
        let tags: Vec<Option<&str>> = self.langs.iter().map(|l| Some(l.as_str())).collect();
        make_language_mask(&tags, routes)
    }
}
