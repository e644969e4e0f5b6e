//! Batch samplers. Every sampler is a pure function of its seed and the
//! step index, so batches can be recomputed or prefetched in any order.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};

use super::corpus::stream_rng;

/// A sampled utterance: `(language index, index within that language's pool)`.
pub type Pick = (usize, usize);

pub trait BatchSampler {
    fn name(&self) -> &str;
    fn steps_per_epoch(&self) -> usize;
    fn batch(&self, step: u64) -> Vec<Pick>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerParams {
    /// Training utterances per language, in language order.
    pub pool_sizes: Vec<usize>,
    pub batch_size: usize,
    pub per_language: usize,
    pub seed: u64,
}

const RANDOM_DOMAIN: u64 = 2 << 40;
const BALANCED_DOMAIN: u64 = 3 << 40;

/// Seeded shuffle of `0..len` on its own stream.
pub fn permutation(len: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.shuffle(&mut stream_rng(seed, stream));
    p
}

/// Uniform sampling without replacement over the pooled corpus, reshuffled
/// every epoch. The incomplete last batch of an epoch is dropped.
pub struct RandomSampler {
    offsets: Vec<usize>,
    total: usize,
    batch_size: usize,
    seed: u64,
}

impl RandomSampler {
    pub fn new(params: &SamplerParams) -> Result<Self> {
        let total: usize = params.pool_sizes.iter().sum();
        if params.batch_size == 0 || total < params.batch_size {
            return Err(Error::Config(format!(
                "batch size {} must be in 1..={total}",
                params.batch_size
            )));
        }
        let mut offsets = Vec::with_capacity(params.pool_sizes.len());
        let mut acc = 0;
        for &n in &params.pool_sizes {
            offsets.push(acc);
            acc += n;
        }
        Ok(Self {
            offsets,
            total,
            batch_size: params.batch_size,
            seed: params.seed,
        })
    }

    fn locate(&self, pooled: usize) -> Pick {
        let lang = self.offsets.partition_point(|&o| o <= pooled) - 1;
        (lang, pooled - self.offsets[lang])
    }
}

impl BatchSampler for RandomSampler {
    fn name(&self) -> &str {
        "random"
    }

    fn steps_per_epoch(&self) -> usize {
        self.total / self.batch_size
    }

    fn batch(&self, step: u64) -> Vec<Pick> {
        let spe = self.steps_per_epoch() as u64;
        let perm = permutation(self.total, self.seed, RANDOM_DOMAIN + step / spe);
        let start = (step % spe) as usize * self.batch_size;
        perm[start..start + self.batch_size].iter().map(|&p| self.locate(p)).collect()
    }
}

/// Exactly `per_language` utterances from every language in every batch.
/// Each language cycles through its own reshuffled pool, so small pools are
/// revisited more often.
pub struct BalancedSampler {
    pool_sizes: Vec<usize>,
    per_language: usize,
    steps_per_epoch: usize,
    seed: u64,
}

impl BalancedSampler {
    pub fn new(params: &SamplerParams) -> Result<Self> {
        if params.per_language == 0 {
            return Err(Error::Config("balanced sampling needs per_language >= 1".into()));
        }
        if let Some(i) = params.pool_sizes.iter().position(|&n| n == 0) {
            return Err(Error::Data(format!("language {i} has no training utterances")));
        }
        let total: usize = params.pool_sizes.iter().sum();
        let batch = params.per_language * params.pool_sizes.len();
        Ok(Self {
            pool_sizes: params.pool_sizes.clone(),
            per_language: params.per_language,
            steps_per_epoch: (total / batch).max(1),
            seed: params.seed,
        })
    }
}

impl BatchSampler for BalancedSampler {
    fn name(&self) -> &str {
        "balanced"
    }

    fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    fn batch(&self, step: u64) -> Vec<Pick> {
        let mut out = Vec::with_capacity(self.per_language * self.pool_sizes.len());
        for (lang, &n) in self.pool_sizes.iter().enumerate() {
            let mut cached: Option<(u64, Vec<usize>)> = None;
            for j in 0..self.per_language as u64 {
                let pos = step * self.per_language as u64 + j;
                let cycle = pos / n as u64;
                if cached.as_ref().is_none_or(|(c, _)| *c != cycle) {
                    let stream = BALANCED_DOMAIN + ((lang as u64) << 32) + cycle;
                    cached = Some((cycle, permutation(n, self.seed, stream)));
                }
                let perm = &cached.as_ref().expect("filled above").1;
                out.push((lang, perm[(pos % n as u64) as usize]));
            }
        }
        out
    }
}

type SamplerFactory = Box<dyn Fn(&SamplerParams) -> Result<Box<dyn BatchSampler>>>;

/// Samplers selectable by name from configuration.
pub struct SamplerRegistry {
    entries: Vec<(String, SamplerFactory)>,
}

impl Default for SamplerRegistry {
    fn default() -> Self {
        let mut r = Self { entries: Vec::new() };
        r.register("random", Box::new(|p| Ok(Box::new(RandomSampler::new(p)?))));
        r.register("balanced", Box::new(|p| Ok(Box::new(BalancedSampler::new(p)?))));
        r
    }
}

impl SamplerRegistry {
    pub fn register(&mut self, name: &str, factory: SamplerFactory) {
        self.entries.retain(|(n, _)| n != name);
        self.entries.push((name.to_string(), factory));
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.iter().map(|(n, _)| n.as_str()).collect()
    }

    pub fn build(&self, name: &str, params: &SamplerParams) -> Result<Box<dyn BatchSampler>> {
        let (_, f) = self
            .entries
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("unknown sampler {name:?}; known: {:?}", self.names())))?;
        f(params)
    }
}
