use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

const CONSONANTS: &str = "ktpsmnrlbdgfhvzj";
const VOWELS: &str = "aeiou";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LanguageSpec {
    pub id: String,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusSpec {
    pub languages: Vec<LanguageSpec>,
    pub inventory_size: usize,
    pub subset_size: usize,
    pub zipf_exponent: f64,
    pub feat_dim: usize,
    pub noise: f64,
    pub frames_per_token: [usize; 2],
    pub tokens_per_utterance: [usize; 2],
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        let lang = |id: &str, train| LanguageSpec {
            id: id.into(),
            train,
            valid: 60,
            test: 60,
        };
        Self {
            languages: vec![lang("en", 2000), lang("fr", 800), lang("tr", 300), lang("ky", 100)],
            inventory_size: 40,
            subset_size: 18,
            zipf_exponent: 1.2,
            feat_dim: 8,
            noise: 0.3,
            frames_per_token: [2, 4],
            tokens_per_utterance: [3, 8],
            seed: 0,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("corpus: {m}")));
        if self.languages.is_empty() {
            return bad("no languages".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for l in &self.languages {
            if l.train == 0 || !seen.insert(&l.id) || l.id.is_empty() {
                return bad(format!("language {:?} is duplicated, unnamed or has no training data", l.id));
            }
        }
        if self.inventory_size > CONSONANTS.len() * VOWELS.len() {
            return bad(format!("inventory_size {} exceeds {}", self.inventory_size, CONSONANTS.len() * VOWELS.len()));
        }
        if self.subset_size == 0 || self.subset_size > self.inventory_size {
            return bad(format!("subset_size {} not in 1..={}", self.subset_size, self.inventory_size));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf_exponent {}", self.zipf_exponent));
        }
        if self.feat_dim == 0 || !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad("feat_dim must be positive and noise non-negative".into());
        }
        for (name, [lo, hi]) in [("frames_per_token", self.frames_per_token), ("tokens_per_utterance", self.tokens_per_utterance)] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}]"));
            }
        }
        Ok(())
    }

    /// Global token inventory of consonant-vowel syllables.
    pub fn inventory(&self) -> Vec<String> {
        CONSONANTS
            .chars()
            .flat_map(|c| VOWELS.chars().map(move |v| format!("{c}{v}")))
            .take(self.inventory_size)
            .collect()
    }

    /// Inventory indices used by language `i`: a window sliding evenly
    /// across the inventory so neighbouring languages overlap.
    pub fn language_window(&self, i: usize) -> std::ops::Range<usize> {
        let n = self.languages.len();
        let span = self.inventory_size - self.subset_size;
        let offset = if n <= 1 {
            0
        } else {
            (i as f64 * span as f64 / (n - 1) as f64).round() as usize
        };
        offset..offset + self.subset_size
    }

    pub fn language_ids(&self) -> Vec<String> {
        self.languages.iter().map(|l| l.id.clone()).collect()
    }
}

/// Independent random stream `stream` derived from `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const PROTOTYPE_STREAM: u64 = 0;
const RANKING_STREAM: u64 = 1;
const UTTERANCE_STREAM: u64 = 1000;
const TEXT_STREAM: u64 = 5000;

/// Zipf distribution over a language's tokens, ranked by a seeded permutation.
#[derive(Clone, Debug)]
pub struct ZipfTokens {
    /// Inventory index of each rank, most frequent first.
    pub ranked: Vec<usize>,
    pub probs: Vec<f64>,
    dist: WeightedIndex<f64>,
}

impl ZipfTokens {
    pub fn new(window: std::ops::Range<usize>, exponent: f64, rng: &mut impl Rng) -> Self {
        let mut ranked: Vec<usize> = window.collect();
        ranked.shuffle(rng);
        let weights: Vec<f64> = (0..ranked.len()).map(|r| (r as f64 + 1.0).powf(-exponent)).collect();
        let z: f64 = weights.iter().sum();
        let probs = weights.iter().map(|w| w / z).collect();
        let dist = WeightedIndex::new(&weights).expect("positive weights");
        Self { ranked, probs, dist }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        self.ranked[self.dist.sample(rng)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub lang: String,
    pub text: String,
    /// `T × F` acoustic features.
    pub frames: Tensor,
}

#[derive(Serialize, Deserialize)]
struct UtteranceRecord {
    id: String,
    lang: String,
    text: String,
    frames: Vec<Vec<f64>>,
}

impl From<&Utterance> for UtteranceRecord {
    fn from(u: &Utterance) -> Self {
        Self {
            id: u.id.clone(),
            lang: u.lang.clone(),
            text: u.text.clone(),
            frames: (0..u.frames.rows()).map(|r| u.frames.row_slice(r).to_vec()).collect(),
        }
    }
}

impl TryFrom<UtteranceRecord> for Utterance {
    type Error = Error;

    fn try_from(r: UtteranceRecord) -> Result<Self> {
        if r.frames.is_empty() {
            return Err(Error::Data(format!("utterance {} has no frames", r.id)));
        }
        let frames = Tensor::from_rows(&r.frames).map_err(|e| Error::Data(format!("utterance {}: {e}", r.id)))?;
        Ok(Self {
            id: r.id,
            lang: r.lang,
            text: r.text,
            frames,
        })
    }
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub train: Vec<Utterance>,
    pub valid: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

impl Corpus {
    pub fn split(&self, name: &str) -> Result<&[Utterance]> {
        match name {
            "train" => Ok(&self.train),
            "valid" => Ok(&self.valid),
            "test" => Ok(&self.test),
            other => Err(Error::Config(format!("unknown split {other:?}; expected one of {SPLITS:?}"))),
        }
    }

    fn split_mut(&mut self, name: &str) -> &mut Vec<Utterance> {
        match name {
            "train" => &mut self.train,
            "valid" => &mut self.valid,
            _ => &mut self.test,
        }
    }

    /// Utterances of one split grouped by language, in corpus order.
    pub fn by_language(utts: &[Utterance]) -> BTreeMap<&str, Vec<&Utterance>> {
        let mut out: BTreeMap<&str, Vec<&Utterance>> = BTreeMap::new();
        for u in utts {
            out.entry(u.lang.as_str()).or_default().push(u);
        }
        out
    }
}

/// Fixed random unit vector per inventory token.
pub fn prototypes(spec: &CorpusSpec) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(spec.seed, PROTOTYPE_STREAM);
    (0..spec.inventory_size)
        .map(|_| {
            let v: Vec<f64> = (0..spec.feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

pub fn zipf_tables(spec: &CorpusSpec) -> Vec<ZipfTokens> {
    (0..spec.languages.len())
        .map(|i| {
            let mut rng = stream_rng(spec.seed, RANKING_STREAM + i as u64);
            ZipfTokens::new(spec.language_window(i), spec.zipf_exponent, &mut rng)
        })
        .collect()
}

/// Repeats each token's prototype `repeats[i]` times and adds Gaussian noise.
pub fn render_frames(tokens: &[usize], repeats: &[usize], protos: &[Vec<f64>], noise: f64, rng: &mut impl Rng) -> Tensor {
    let normal = Normal::new(0.0, noise).expect("non-negative noise");
    let mut rows = Vec::new();
    for (&tok, &rep) in tokens.iter().zip(repeats) {
        for _ in 0..rep {
            rows.push(protos[tok].iter().map(|&p| p + normal.sample(rng)).collect::<Vec<_>>());
        }
    }
    Tensor::from_rows(&rows).expect("rectangular frames")
}

pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let inventory = spec.inventory();
    let protos = prototypes(spec);
    let zipf = zipf_tables(spec);
    let mut corpus = Corpus::default();
    for (li, lang) in spec.languages.iter().enumerate() {
        for (si, split) in SPLITS.iter().enumerate() {
            let count = [lang.train, lang.valid, lang.test][si];
            let mut rng = stream_rng(spec.seed, UTTERANCE_STREAM + (li * SPLITS.len() + si) as u64);
            for k in 0..count {
                let [lo, hi] = spec.tokens_per_utterance;
                let n = rng.random_range(lo..=hi);
                let tokens: Vec<usize> = (0..n).map(|_| zipf[li].sample(&mut rng)).collect();
                let [flo, fhi] = spec.frames_per_token;
                let repeats: Vec<usize> = (0..n).map(|_| rng.random_range(flo..=fhi)).collect();
                let frames = render_frames(&tokens, &repeats, &protos, spec.noise, &mut rng);
                let text = tokens.iter().map(|&t| inventory[t].as_str()).collect::<Vec<_>>().join(" ");
                corpus.split_mut(split).push(Utterance {
                    id: format!("{}-{split}-{k:05}", lang.id),
                    lang: lang.id.clone(),
                    text,
                    frames,
                });
            }
        }
    }
    Ok(corpus)
}

/// Text-only sentences drawn from each language's token distribution, with
/// no acoustic side. Returns `(language, text)` pairs, `per_language` each.
pub fn generate_text(spec: &CorpusSpec, per_language: usize) -> Result<Vec<(String, String)>> {
    spec.validate()?;
    let inventory = spec.inventory();
    let zipf = zipf_tables(spec);
    let mut out = Vec::with_capacity(per_language * spec.languages.len());
    for (li, lang) in spec.languages.iter().enumerate() {
        let mut rng = stream_rng(spec.seed, TEXT_STREAM + li as u64);
        for _ in 0..per_language {
            let [lo, hi] = spec.tokens_per_utterance;
            let n = rng.random_range(lo..=hi);
            let text: Vec<&str> = (0..n).map(|_| inventory[zipf[li].sample(&mut rng)].as_str()).collect();
            out.push((lang.id.clone(), text.join(" ")));
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitEntry {
    pub file: String,
    pub utterances: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusManifest {
    pub format_version: u32,
    pub seed: u64,
    pub spec: CorpusSpec,
    pub splits: BTreeMap<String, SplitEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes one JSON-lines file per split plus a manifest echoing the spec.
pub fn save_corpus(dir: &Path, spec: &CorpusSpec, corpus: &Corpus) -> Result<CorpusManifest> {
    std::fs::create_dir_all(dir)?;
    let mut splits = BTreeMap::new();
    for split in SPLITS {
        let file = format!("{split}.jsonl");
        let mut w = BufWriter::new(File::create(dir.join(&file))?);
        let utts = corpus.split(split)?;
        for u in utts {
            serde_json::to_writer(&mut w, &UtteranceRecord::from(u))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        splits.insert(split.to_string(), SplitEntry { file, utterances: utts.len() });
    }
    let manifest = CorpusManifest {
        format_version: FORMAT_VERSION,
        seed: spec.seed,
        spec: spec.clone(),
        splits,
    };
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let m: CorpusManifest = serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("corpus format version {} unsupported", m.format_version)));
    }
    Ok(m)
}

pub fn load_corpus(dir: &Path) -> Result<(CorpusManifest, Corpus)> {
    let manifest = load_manifest(dir)?;
    let mut corpus = Corpus::default();
    for split in SPLITS {
        let entry = manifest
            .splits
            .get(split)
            .ok_or_else(|| Error::Data(format!("manifest lacks split {split}")))?;
        let reader = BufReader::new(File::open(dir.join(&entry.file))?);
        let out = corpus.split_mut(split);
        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            let rec: UtteranceRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}:{}: {e}", entry.file, n + 1)))?;
            out.push(Utterance::try_from(rec)?);
        }
        if out.len() != entry.utterances {
            return Err(Error::Data(format!(
                "{} holds {} utterances, manifest says {}",
                entry.file,
                out.len(),
                entry.utterances
            )));
        }
    }
    Ok((manifest, corpus))
}

/// Rebuilds the corpus in `dir` from its manifest.
pub fn regenerate(dir: &Path) -> Result<Corpus> {
    let manifest = load_manifest(dir)?;
    let corpus = generate_corpus(&manifest.spec)?;
    save_corpus(dir, &manifest.spec, &corpus)?;
    Ok(corpus)
}
