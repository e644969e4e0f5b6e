use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character edits and reference length; spaces count as characters.
pub fn char_errors(reference: &str, hypothesis: &str) -> Result<(usize, usize)> {
    let r: Vec<char> = reference.chars().collect();
    if r.is_empty() {
        return Err(Error::Contract("character error rate of an empty reference".into()));
    }
    let h: Vec<char> = hypothesis.chars().collect();
    Ok((edit_distance(&r, &h), r.len()))
}

pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let (e, n) = char_errors(reference, hypothesis)?;
    Ok(e as f64 / n as f64)
}

/// One decoded utterance, as written to the per-utterance JSONL file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UttResult {
    pub id: String,
    pub lang: String,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
    pub cer: f64,
    pub attn_score: f64,
    pub ctc_score: f64,
    pub errors: usize,
    pub ref_chars: usize,
    #[serde(default)]
    pub hit_max_len: bool,
}

impl UttResult {
    pub fn new(id: &str, lang: &str, reference: &str, hyp: &str) -> Result<Self> {
        let (errors, ref_chars) = char_errors(reference, hyp)?;
        Ok(Self {
            id: id.into(),
            lang: lang.into(),
            reference: reference.into(),
            hyp: hyp.into(),
            cer: errors as f64 / ref_chars as f64,
            attn_score: 0.0,
            ctc_score: 0.0,
            errors,
            ref_chars,
            hit_max_len: false,
        })
    }

    /// Recomputes the error counts from `ref` and `hyp`.
    pub fn rescore(&self) -> Result<Self> {
        let fresh = Self::new(&self.id, &self.lang, &self.reference, &self.hyp)?;
        Ok(Self {
            attn_score: self.attn_score,
            ctc_score: self.ctc_score,
            hit_max_len: self.hit_max_len,
            ..fresh
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LanguageRow {
    pub lang: String,
    pub utterances: usize,
    pub errors: usize,
    pub ref_chars: usize,
    pub cer: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<LanguageRow>,
    /// Pooled over all characters.
    pub micro_cer: f64,
    /// Unweighted mean of the per-language rates.
    pub macro_cer: f64,
}

impl Report {
    /// Aggregates per language. Rows follow `order`; languages missing from
    /// `order` come after it alphabetically, and languages with no results are omitted.
    pub fn from_results(results: &[UttResult], order: &[String]) -> Result<Self> {
        if results.is_empty() {
            return Err(Error::Data("no results to report".into()));
        }
        let mut by_lang: BTreeMap<&str, (usize, usize, usize)> = BTreeMap::new();
        for r in results {
            let e = by_lang.entry(&r.lang).or_default();
            e.0 += 1;
            e.1 += r.errors;
            e.2 += r.ref_chars;
        }
        let mut langs: Vec<&str> = order.iter().map(String::as_str).filter(|l| by_lang.contains_key(l)).collect();
        langs.extend(by_lang.keys().filter(|l| !order.iter().any(|o| o == *l)));
        let rows: Vec<LanguageRow> = langs
            .into_iter()
            .map(|l| {
                let (n, e, c) = by_lang[l];
                LanguageRow {
                    lang: l.to_string(),
                    utterances: n,
                    errors: e,
                    ref_chars: c,
                    cer: e as f64 / c as f64,
                }
            })
            .collect();
        let errors: usize = rows.iter().map(|r| r.errors).sum();
        let chars: usize = rows.iter().map(|r| r.ref_chars).sum();
        let macro_cer = rows.iter().map(|r| r.cer).sum::<f64>() / rows.len() as f64;
        Ok(Self {
            rows,
            micro_cer: errors as f64 / chars as f64,
            macro_cer,
        })
    }

    pub fn row(&self, lang: &str) -> Option<&LanguageRow> {
        self.rows.iter().find(|r| r.lang == lang)
    }

    /// Aligned text table, rates in percent.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8}", "lang", "utts", "chars", "CER%");
        for r in &self.rows {
            let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8.2}", r.lang, r.utterances, r.ref_chars, 100.0 * r.cer);
        }
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8.2}", "micro", "", "", 100.0 * self.micro_cer);
        let _ = writeln!(s, "{:<8} {:>6} {:>8} {:>8.2}", "macro", "", "", 100.0 * self.macro_cer);
        s
    }
}
