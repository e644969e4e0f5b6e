use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const UNK: &str = "<unk>";
pub const SOS: &str = "<sos>";
pub const EOS: &str = "<eos>";
pub const BLANK: &str = "<blank>";

/// Token inventory: regular tokens first, then `<unk>`, `<sos>`, `<eos>` and
/// the CTC blank as the last id.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabFile", into = "VocabFile")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
}

impl From<VocabFile> for Vocabulary {
    fn from(f: VocabFile) -> Self {
        let index = f.tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: f.tokens, index }
    }
}

impl From<Vocabulary> for VocabFile {
    fn from(v: Vocabulary) -> Self {
        Self { tokens: v.tokens }
    }
}

impl Vocabulary {
    pub fn from_regular(regular: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = regular.into_iter().collect();
        for t in &tokens {
            if t.is_empty() || t.contains(char::is_whitespace) || [UNK, SOS, EOS, BLANK].contains(&t.as_str()) {
                return Err(Error::Data(format!("invalid token {t:?}")));
            }
        }
        tokens.extend([UNK, SOS, EOS, BLANK].map(String::from));
        let v = Self::from(VocabFile { tokens });
        if v.index.len() != v.tokens.len() {
            return Err(Error::Data("duplicate tokens in vocabulary".into()));
        }
        Ok(v)
    }

    /// Frequency-ranked inventory of whitespace-separated tokens seen at least
    /// `min_count` times; ties are broken by token string.
    pub fn build<'a>(transcripts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for text in transcripts {
            for tok in text.split_whitespace() {
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::Data("cannot build a vocabulary from empty transcripts".into()));
        }
        let mut ranked: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, c)| c >= min_count.max(1)).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        Self::from_regular(ranked.into_iter().map(|(t, _)| t.to_string()))
    }

    /// Total size including the blank.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Output size of the attention decoder (everything but the blank).
    pub fn model_size(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn num_regular(&self) -> usize {
        self.tokens.len() - 4
    }

    pub fn unk(&self) -> usize {
        self.tokens.len() - 4
    }

    pub fn sos(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn blank(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn is_regular(&self, id: usize) -> bool {
        id < self.num_regular()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Bare token ids; unknown tokens become `<unk>`.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|t| self.id(t).unwrap_or(self.unk())).collect()
    }

    /// Joins tokens with spaces, dropping `<sos>`, `<eos>` and blank.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i < self.len() && (self.is_regular(i) || i == self.unk()))
            .map(|&i| self.tokens[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specials_follow_frequency_ranked_tokens() {
        let v = Vocabulary::build(["ka ti ka", "po ti ka"], 1).unwrap();
        assert_eq!(v.tokens(), ["ka", "ti", "po", UNK, SOS, EOS, BLANK]);
        assert_eq!(v.len(), 3 + 4);
        assert_eq!(v.blank(), v.len() - 1);
        assert_eq!(v.model_size(), 6);
    }

    #[test]
    fn rare_token_becomes_unknown() {
        let v = Vocabulary::build(["ka ti ka", "po ti ka"], 2).unwrap();
        assert_eq!(v.id("po"), None);
        assert_eq!(v.encode("po ka"), vec![v.unk(), 0]);
    }

    #[test]
    fn encode_decode_round_trip() {
        let v = Vocabulary::build(["ka ti ka", "po ti ka"], 1).unwrap();
        for text in ["ka", "po ti ka ka"] {
            assert_eq!(v.decode(&v.encode(text)), text);
        }
        assert_eq!(v.decode(&[v.sos(), 0, v.blank(), 1, v.eos()]), "ka ti");
    }

    #[test]
    fn empty_transcripts_are_rejected() {
        assert!(matches!(Vocabulary::build([" ", ""], 1), Err(Error::Data(_))));
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build(["ka ti ka"], 1).unwrap();
        let back: Vocabulary = serde_json::from_str(&serde_json::to_string(&v).unwrap()).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.id("ti"), Some(1));
    }
}
