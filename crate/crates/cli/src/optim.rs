//! Adam with the noam learning-rate schedule, global-norm clipping and
//! gradient accumulation.

use a2_core::tensorcore::{ParamStore, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: u64,
    /// Multiplier on the noam curve (the step size α).
    pub scale: f64,
    pub grad_clip: f64,
    /// Micro-batches per optimizer step.
    pub accum_steps: usize,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 400,
            scale: 1.0,
            grad_clip: 5.0,
            accum_steps: 1,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.warmup > 0
            && self.scale > 0.0
            && self.grad_clip > 0.0
            && self.accum_steps > 0;
        if ok {
            Ok(())
        } else {
            Err(CliError::Config(format!("optim: invalid settings {self:?}")))
        }
    }
}

/// `scale · d^−0.5 · min(s^−0.5, s · warmup^−1.5)` for optimizer step `s ≥ 1`.
pub fn noam_lr(d_model: usize, warmup: u64, scale: f64, step: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup as f64;
    scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
}

/// Euclidean norm over every present gradient.
pub fn global_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .flat_map(|g| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }
    norm
}

/// Sums micro-batch gradients; [`Self::take_mean`] yields their average.
#[derive(Debug, Default)]
pub struct GradAccumulator {
    sum: Vec<Option<Tensor>>,
    count: usize,
}

impl GradAccumulator {
    pub fn add(&mut self, grads: Vec<Option<Tensor>>) {
        if self.sum.is_empty() {
            self.sum = grads;
        } else {
            for (s, g) in self.sum.iter_mut().zip(grads) {
                match (s.as_mut(), g) {
                    (Some(s), Some(g)) => s.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    (None, Some(g)) => *s = Some(g),
                    _ => {}
                }
            }
        }
        self.count += 1;
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn take_mean(&mut self) -> Vec<Option<Tensor>> {
        let n = self.count.max(1) as f64;
        let mut out = std::mem::take(&mut self.sum);
        self.count = 0;
        for g in out.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v /= n);
        }
        out
    }
}

pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, config: &OptimConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update; frozen parameters and parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let Some(g) = grads.get(k).and_then(Option::as_ref) else {
                continue;
            };
            if store.is_frozen(id) {
                continue;
            }
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            let p = store.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g.data()[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g.data()[i] * g.data()[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noam_peak_value() {
        let lr = noam_lr(256, 25000, 1.0, 25000);
        assert!((lr - 256f64.powf(-0.5) * 25000f64.powf(-0.5)).abs() < 1e-18);
        assert!(noam_lr(256, 100, 1.0, 50) < noam_lr(256, 100, 1.0, 100));
        assert!(noam_lr(256, 100, 1.0, 400) < noam_lr(256, 100, 1.0, 100));
        assert_eq!(noam_lr(16, 10, 2.0, 10), 2.0 * noam_lr(16, 10, 1.0, 10));
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::row(&[3.0, 4.0])), None, Some(Tensor::row(&[12.0]))];
        let before = clip_global_norm(&mut g, 5.0);
        assert_eq!(before, 13.0);
        assert!(global_norm(&g) <= 5.0 + 1e-12);
        let mut small = vec![Some(Tensor::row(&[0.3]))];
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small[0].as_ref().unwrap().data(), &[0.3]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::row(&[1.0, -1.0]));
        s.add("f", Tensor::row(&[5.0]));
        s.set_frozen(s.find("f").unwrap(), true);
        let mut adam = Adam::new(&s, &OptimConfig::default());
        adam.step(&mut s, &[Some(Tensor::row(&[0.5, -2.0])), Some(Tensor::row(&[1.0]))], 0.1);
        let w = s.get(s.find("w").unwrap()).data().to_vec();
        assert!((w[0] - 0.9).abs() < 1e-8 && (w[1] + 0.9).abs() < 1e-8);
        assert_eq!(s.get(s.find("f").unwrap()).data(), &[5.0]);
    }
}
