//! Connectionist temporal classification loss over blank-interleaved labels.

use crate::error::{Error, Result};
use crate::tensorcore::{log_add, Tensor, Var};

/// Negative log-likelihood and its gradient w.r.t. the per-frame log-probabilities.
#[derive(Clone, Debug)]
pub struct CtcForwardBackward {
    pub loss: f64,
    pub grad: Tensor,
}

fn check(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<()> {
    if log_probs.shape().len() != 2 {
        return Err(Error::Dimension(format!("ctc log-probs must be 2-D, got {:?}", log_probs.shape())));
    }
    let k = log_probs.cols();
    if blank >= k {
        return Err(Error::Dimension(format!("blank id {blank} outside {k} classes")));
    }
    if let Some(&bad) = target.iter().find(|&&t| t >= k || t == blank) {
        return Err(Error::Data(format!("ctc target id {bad} is blank or outside {k} classes")));
    }
    Ok(())
}

/// Minimum number of frames needed to emit `target`.
pub fn min_frames(target: &[usize]) -> usize {
    target.len() + target.windows(2).filter(|w| w[0] == w[1]).count()
}

fn extended(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

fn can_skip(ext: &[usize], s: usize, blank: usize) -> bool {
    s >= 2 && ext[s] != blank && ext[s] != ext[s - 2]
}

fn alpha(log_probs: &Tensor, ext: &[usize], blank: usize) -> Vec<Vec<f64>> {
    let t_len = log_probs.rows();
    let s_len = ext.len();
    let mut a = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    a[0][0] = log_probs.get2(0, ext[0]);
    if s_len > 1 {
        a[0][1] = log_probs.get2(0, ext[1]);
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = a[t - 1][s];
            if s >= 1 {
                acc = log_add(acc, a[t - 1][s - 1]);
            }
            if can_skip(ext, s, blank) {
                acc = log_add(acc, a[t - 1][s - 2]);
            }
            if acc > f64::NEG_INFINITY {
                a[t][s] = acc + log_probs.get2(t, ext[s]);
            }
        }
    }
    a
}

fn final_log_prob(a: &[Vec<f64>]) -> f64 {
    let last = a.last().expect("at least one frame");
    let s_len = last.len();
    if s_len > 1 {
        log_add(last[s_len - 1], last[s_len - 2])
    } else {
        last[0]
    }
}

/// `−log p(target | frames)`, or `+∞` when the target cannot fit in the frames.
pub fn ctc_loss_value(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<f64> {
    check(log_probs, target, blank)?;
    if log_probs.rows() == 0 || log_probs.rows() < min_frames(target) {
        return Ok(f64::INFINITY);
    }
    let a = alpha(log_probs, &extended(target, blank), blank);
    Ok(-final_log_prob(&a))
}

/// Loss plus gradient from the forward-backward recursions. `None` when the
/// target cannot fit in the available frames.
pub fn ctc_forward_backward(log_probs: &Tensor, target: &[usize], blank: usize) -> Result<Option<CtcForwardBackward>> {
    check(log_probs, target, blank)?;
    let t_len = log_probs.rows();
    if t_len == 0 || t_len < min_frames(target) {
        return Ok(None);
    }
    let ext = extended(target, blank);
    let s_len = ext.len();
    let a = alpha(log_probs, &ext, blank);
    let log_p = final_log_prob(&a);
    if log_p == f64::NEG_INFINITY {
        return Ok(None);
    }

    // b[t][s]: log-probability of the frames after t given state s at t.
    let mut b = vec![vec![f64::NEG_INFINITY; s_len]; t_len];
    b[t_len - 1][s_len - 1] = 0.0;
    if s_len > 1 {
        b[t_len - 1][s_len - 2] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = b[t + 1][s] + log_probs.get2(t + 1, ext[s]);
            if s + 1 < s_len {
                acc = log_add(acc, b[t + 1][s + 1] + log_probs.get2(t + 1, ext[s + 1]));
            }
            if s + 2 < s_len && can_skip(&ext, s + 2, blank) {
                acc = log_add(acc, b[t + 1][s + 2] + log_probs.get2(t + 1, ext[s + 2]));
            }
            b[t][s] = acc;
        }
    }

    let k = log_probs.cols();
    let mut grad = Tensor::zeros(&[t_len, k]);
    for t in 0..t_len {
        let row = grad.row_slice_mut(t);
        for s in 0..s_len {
            let occ = a[t][s] + b[t][s];
            if occ > f64::NEG_INFINITY {
                row[ext[s]] -= (occ - log_p).exp();
            }
        }
    }
    Ok(Some(CtcForwardBackward { loss: -log_p, grad }))
}

/// Taped CTC loss over `log_probs` (`T × K`, already log-normalized).
/// Returns `None` for infeasible targets so the caller can skip them.
pub fn ctc_loss<'t>(log_probs: Var<'t>, target: &[usize], blank: usize) -> Result<Option<Var<'t>>> {
    let fb = ctc_forward_backward(&log_probs.value(), target, blank)?;
    match fb {
        Some(fb) => Ok(Some(log_probs.custom_scalar(fb.loss, fb.grad)?)),
        None => {
            log::debug!(
                "ctc target of {} labels needs {} frames, got {}; skipped",
                target.len(),
                min_frames(target),
                log_probs.value().rows()
            );
            Ok(None)
        }
    }
}
