use crate::tensorcore::{log_add, Tensor};

/// Forward variables of one prefix: log-probability of having emitted the
/// prefix by frame `t` and currently sitting on a label (`nonblank`) or a blank.
#[derive(Clone, Debug, PartialEq)]
pub struct CtcPrefixState {
    pub nonblank: Vec<f64>,
    pub blank: Vec<f64>,
    pub last: Option<usize>,
    /// Log-probability of all label sequences starting with the prefix.
    pub score: f64,
}

/// Prefix probabilities over fixed per-frame CTC log-probabilities.
pub struct CtcPrefixScorer<'a> {
    log_probs: &'a Tensor,
    blank: usize,
}

impl<'a> CtcPrefixScorer<'a> {
    pub fn new(log_probs: &'a Tensor, blank: usize) -> Self {
        Self { log_probs, blank }
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    /// State of the empty prefix: only blanks emitted so far.
    pub fn initial(&self) -> CtcPrefixState {
        let t_len = self.frames();
        let mut blank = vec![f64::NEG_INFINITY; t_len];
        let mut acc = 0.0;
        for (t, b) in blank.iter_mut().enumerate() {
            acc += self.log_probs.get2(t, self.blank);
            *b = acc;
        }
        CtcPrefixState {
            nonblank: vec![f64::NEG_INFINITY; t_len],
            blank,
            last: None,
            score: 0.0,
        }
    }

    /// Log-probability that the label sequence is exactly the prefix.
    pub fn finalize(&self, state: &CtcPrefixState) -> f64 {
        match self.frames() {
            0 => {
                if state.last.is_none() {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            t => log_add(state.nonblank[t - 1], state.blank[t - 1]),
        }
    }

    /// Extends the prefix by label `c`.
    pub fn extend(&self, state: &CtcPrefixState, c: usize) -> CtcPrefixState {
        let t_len = self.frames();
        let x = self.log_probs;
        let mut nonblank = vec![f64::NEG_INFINITY; t_len];
        let mut blank = vec![f64::NEG_INFINITY; t_len];
        if t_len == 0 {
            return CtcPrefixState {
                nonblank,
                blank,
                last: Some(c),
                score: f64::NEG_INFINITY,
            };
        }
        // Mass from which the new label may start at the next frame; a repeated
        // label must be separated from its predecessor by a blank.
        let phi = |t: usize| {
            if state.last == Some(c) {
                state.blank[t]
            } else {
                log_add(state.blank[t], state.nonblank[t])
            }
        };
        if state.last.is_none() {
            nonblank[0] = x.get2(0, c);
        }
        let mut score = nonblank[0];
        for t in 1..t_len {
            let start = phi(t - 1);
            nonblank[t] = log_add(nonblank[t - 1], start) + x.get2(t, c);
            blank[t] = log_add(blank[t - 1], nonblank[t - 1]) + x.get2(t, self.blank);
            score = log_add(score, start + x.get2(t, c));
        }
        CtcPrefixState {
            nonblank,
            blank,
            last: Some(c),
            score,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::ctc_loss_value;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_lp(seed: u64, t: usize, k: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![t, k], (0..t * k).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
            .log_softmax_rows()
            .unwrap()
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = None;
        for &p in path {
            if Some(p) != prev && p != blank {
                out.push(p);
            }
            prev = Some(p);
        }
        out
    }

    /// Sums path probabilities whose collapsed labelling starts with `prefix`.
    fn brute_prefix(lp: &Tensor, prefix: &[usize], blank: usize) -> f64 {
        let (t, k) = (lp.rows(), lp.cols());
        let mut total = 0.0;
        for code in 0..k.pow(t as u32) {
            let path: Vec<usize> = (0..t).map(|i| code / k.pow(i as u32) % k).collect();
            if collapse(&path, blank).starts_with(prefix) {
                total += path.iter().enumerate().map(|(i, &p)| lp.get2(i, p)).sum::<f64>().exp();
            }
        }
        total.ln()
    }

    #[test]
    fn empty_prefix_is_all_blank_path() {
        let lp = random_lp(1, 3, 3);
        let s = CtcPrefixScorer::new(&lp, 2);
        let all_blank: f64 = (0..3).map(|t| lp.get2(t, 2)).sum();
        assert!((s.finalize(&s.initial()) - all_blank).abs() < 1e-12);
    }

    #[test]
    fn prefix_scores_match_path_enumeration() {
        for seed in 0..10 {
            let lp = random_lp(seed, 2, 3);
            let s = CtcPrefixScorer::new(&lp, 2);
            let a = s.extend(&s.initial(), 0);
            assert!((a.score - brute_prefix(&lp, &[0], 2)).abs() < 1e-12);
            let lp = random_lp(seed + 100, 4, 3);
            let s = CtcPrefixScorer::new(&lp, 2);
            let mut st = s.initial();
            for (i, &c) in [1, 1, 0].iter().enumerate() {
                st = s.extend(&st, c);
                let expect = brute_prefix(&lp, &[1, 1, 0][..=i], 2);
                assert!((st.score - expect).abs() < 1e-10 || (st.score == expect));
            }
        }
    }

    #[test]
    fn finalized_score_is_negated_ctc_loss() {
        for seed in 0..20 {
            let lp = random_lp(seed, 6, 4);
            let s = CtcPrefixScorer::new(&lp, 3);
            let target = [seed as usize % 3, 1, 1];
            let mut st = s.initial();
            for &c in &target {
                st = s.extend(&st, c);
            }
            let loss = ctc_loss_value(&lp, &target, 3).unwrap();
            assert!((s.finalize(&st) + loss).abs() < 1e-10);
        }
    }
}
