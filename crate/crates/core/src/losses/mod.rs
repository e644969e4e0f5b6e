//! Training objectives, class priors and logit adjustment.

mod ctc;
mod priors;

pub use ctc::{ctc_forward_backward, ctc_loss, ctc_loss_value, min_frames, CtcForwardBackward};
pub use priors::ClassPriors;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorcore::{Tensor, Var};

/// Argument order of the smoothed-label divergence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KlDirection {
    /// `KL(p_label ‖ p_model)`: label-smoothed cross-entropy up to a constant.
    #[default]
    Standard,
    /// `KL(p_model ‖ p_label)`; needs a positive smoothing mass.
    Literal,
}

/// Training objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// CTC weight in the multi-task interpolation.
    pub lambda: f64,
    pub label_smoothing: f64,
    /// Training-phase logit adjustment strength; 0 disables it.
    pub tau: f64,
    pub kl_direction: KlDirection,
    /// Scheduled sampling; `None` uses [`SamplingSchedule::for_epochs`].
    pub scheduled_sampling: Option<SamplingSchedule>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.3,
            label_smoothing: 0.1,
            tau: 0.0,
            kl_direction: KlDirection::Standard,
            scheduled_sampling: None,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Config(format!("loss.lambda {} outside [0, 1]", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!("loss.label_smoothing {} outside [0, 1)", self.label_smoothing)));
        }
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("loss.tau {} must be non-negative", self.tau)));
        }
        if self.kl_direction == KlDirection::Literal && self.label_smoothing == 0.0 {
            return Err(Error::Config("loss.kl_direction = literal needs label_smoothing > 0".into()));
        }
        if let Some(s) = &self.scheduled_sampling {
            if !(0.0..=1.0).contains(&s.max_prob) || s.start_epoch < 0.0 || s.ramp_epochs < 0.0 {
                return Err(Error::Config(format!("loss.scheduled_sampling {s:?} out of range")));
            }
        }
        Ok(())
    }

    pub fn schedule(&self, epochs: usize) -> SamplingSchedule {
        self.scheduled_sampling.unwrap_or_else(|| SamplingSchedule::for_epochs(epochs))
    }
}

/// Smoothed one-hot targets, one row per step.
pub fn smoothed_targets(targets: &[usize], vocab: usize, epsilon: f64) -> Result<Tensor> {
    let mut q = Tensor::filled(&[targets.len(), vocab], epsilon / vocab as f64);
    for (t, &y) in targets.iter().enumerate() {
        if y >= vocab {
            return Err(Error::Data(format!("target id {y} outside vocabulary of {vocab}")));
        }
        q.row_slice_mut(t)[y] += 1.0 - epsilon;
    }
    Ok(q)
}

/// Summed per-step divergence between smoothed labels and `softmax(logits)`.
/// `logits` is `steps × |V|`, one row per target.
pub fn attention_loss_sum<'t>(
    logits: Var<'t>,
    targets: &[usize],
    epsilon: f64,
    direction: KlDirection,
) -> Result<Var<'t>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Dimension(format!(
            "attention logits {shape:?} for {} targets",
            targets.len()
        )));
    }
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::Config(format!("label smoothing {epsilon} outside [0, 1)")));
    }
    let q = smoothed_targets(targets, shape[1], epsilon)?;
    let log_p = logits.log_softmax()?;
    match direction {
        KlDirection::Standard => {
            let q_log_q: f64 = q.data().iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum();
            let cross = log_p.dot_const(&q)?;
            let tape = logits.tape();
            Ok(tape.constant(Tensor::scalar(q_log_q)).sub(cross)?)
        }
        KlDirection::Literal => {
            if epsilon <= 0.0 {
                return Err(Error::Config("the literal divergence direction needs label smoothing > 0".into()));
            }
            let p = log_p.exp();
            let neg_entropy = p.mul(log_p)?.sum();
            let cross = p.dot_const(&q.map(f64::ln))?;
            Ok(neg_entropy.sub(cross)?)
        }
    }
}

/// Per-step mean of [`attention_loss_sum`].
pub fn attention_loss<'t>(logits: Var<'t>, targets: &[usize], epsilon: f64, direction: KlDirection) -> Result<Var<'t>> {
    let n = targets.len().max(1) as f64;
    Ok(attention_loss_sum(logits, targets, epsilon, direction)?.scale(1.0 / n))
}

/// `λ·ctc + (1−λ)·attention`, both already in minimization orientation.
pub fn mtl_loss<'t>(ctc: Var<'t>, attention: Var<'t>, lambda: f64) -> Result<Var<'t>> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("ctc weight {lambda} outside [0, 1]")));
    }
    Ok(ctc.scale(lambda).add(attention.scale(1.0 - lambda))?)
}

/// `f − τ·log π` for one row of scores.
pub fn adjust_logits(f: &[f64], log_pi: &[f64], tau: f64) -> Result<Vec<f64>> {
    if f.len() != log_pi.len() {
        return Err(Error::Dimension(format!("{} logits vs {} priors", f.len(), log_pi.len())));
    }
    if tau == 0.0 {
        return Ok(f.to_vec());
    }
    Ok(f.iter().zip(log_pi).map(|(x, lp)| x - tau * lp).collect())
}

/// Taped row-wise `f − τ·log π`.
pub fn adjust_logits_var<'t>(logits: Var<'t>, log_pi: &[f64], tau: f64) -> Result<Var<'t>> {
    if tau == 0.0 {
        return Ok(logits);
    }
    let offset = Tensor::row(&log_pi.iter().map(|lp| -tau * lp).collect::<Vec<_>>());
    Ok(logits.add_row(logits.tape().constant(offset))?)
}

/// Linear ramp of the probability of feeding back the model's own prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSchedule {
    pub start_epoch: f64,
    pub ramp_epochs: f64,
    pub max_prob: f64,
}

impl SamplingSchedule {
    /// Starts at half of `epochs` and reaches 0.3 at the end of training.
    pub fn for_epochs(epochs: usize) -> Self {
        let start = epochs as f64 / 2.0;
        Self {
            start_epoch: start,
            ramp_epochs: epochs as f64 - start,
            max_prob: 0.3,
        }
    }

    pub fn disabled() -> Self {
        Self {
            start_epoch: 0.0,
            ramp_epochs: 0.0,
            max_prob: 0.0,
        }
    }

    /// Mixing probability at a fractional epoch.
    pub fn prob(&self, epoch: f64) -> f64 {
        if self.max_prob == 0.0 || epoch < self.start_epoch {
            return 0.0;
        }
        if self.ramp_epochs <= 0.0 {
            return self.max_prob;
        }
        self.max_prob * ((epoch - self.start_epoch) / self.ramp_epochs).min(1.0)
    }
}

/// Returns the argmax of `scores` with probability `p`, otherwise `gold`.
/// Exactly one uniform draw is consumed per call.
pub fn scheduled_sample(scores: &[f64], gold: usize, p: f64, rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    if u < p {
        argmax(scores)
    } else {
        gold
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
