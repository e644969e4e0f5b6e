use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothed token-class frequencies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassPriors {
    pub pi: Vec<f64>,
    pub counts: Vec<u64>,
    pub total: u64,
    pub zero_classes: usize,
}

impl ClassPriors {
    /// Counts every token id in `sequences` over `num_classes` classes.
    pub fn estimate<'a>(sequences: impl IntoIterator<Item = &'a [usize]>, num_classes: usize) -> Result<Self> {
        let mut counts = vec![0u64; num_classes];
        for seq in sequences {
            for &id in seq {
                let c = counts
                    .get_mut(id)
                    .ok_or_else(|| Error::Data(format!("token id {id} outside {num_classes} classes")))?;
                *c += 1;
            }
        }
        Self::from_counts(counts)
    }

    /// Moves a total mass of `1/C` from the observed classes to the unseen
    /// ones, split evenly within each side.
    pub fn from_counts(counts: Vec<u64>) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::Data("cannot estimate priors from an empty corpus".into()));
        }
        let n = counts.len();
        let zero_classes = counts.iter().filter(|&&c| c == 0).count();
        let c_total = total as f64;
        let seen = (n - zero_classes) as f64;
        let pi: Vec<f64> = counts
            .iter()
            .map(|&c| {
                if zero_classes == 0 {
                    c as f64 / c_total
                } else if c > 0 {
                    c as f64 / c_total - 1.0 / (seen * c_total)
                } else {
                    1.0 / (zero_classes as f64 * c_total)
                }
            })
            .collect();
        if let Some(i) = pi.iter().position(|&p| p <= 0.0) {
            return Err(Error::Data(format!(
                "class {i} has non-positive smoothed prior {} (count {}, total {total})",
                pi[i], counts[i]
            )));
        }
        Ok(Self {
            pi,
            counts,
            total,
            zero_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.pi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pi.is_empty()
    }

    pub fn log_pi(&self) -> Vec<f64> {
        self.pi.iter().map(|p| p.ln()).collect()
    }

    /// Writes the priors as a JSON array indexed by token id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.pi)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vec<f64>> {
        let pi: Vec<f64> = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if pi.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::Format(format!("{} contains a non-positive prior", path.display())));
        }
        Ok(pi)
    }
}
