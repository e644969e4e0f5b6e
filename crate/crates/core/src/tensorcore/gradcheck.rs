use super::{Tape, Tensor, TensorError, Var};

/// Compares tape gradients of a scalar function against central differences.
///
/// Returns the largest elementwise relative error, using
/// `max(|analytic|, |numeric|, 1e-8)` as the denominator.
pub fn grad_check<F, E>(f: F, x: &Tensor, eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, Var<'t>) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_multi<F, E>(f: F, xs: &[Tensor], eps: f64) -> Result<f64, E>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
    E: From<TensorError>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let root = f(&tape, &vars)?;
        let grads = tape.backward(root)?;
        vars.iter()
            .zip(xs)
            .map(|(v, x)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };
    let eval = |inputs: &[Tensor]| -> Result<f64, E> {
        let tape = Tape::no_grad();
        let vars: Vec<Var<'_>> = inputs.iter().map(|x| tape.leaf(x.clone())).collect();
        Ok(f(&tape, &vars)?.item())
    };
    let mut worst: f64 = 0.0;
    let mut inputs = xs.to_vec();
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let fp = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - eps;
            let fm = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact() {
        let x = Tensor::from_rows(&[vec![0.3, -0.1], vec![2.0, 5.0]]).unwrap();
        let err = grad_check::<_, TensorError>(|_, v| Ok(v.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn log_softmax_pick() {
        let x = Tensor::row(&[0.2, -1.3, 0.8, 0.05]);
        let err = grad_check::<_, TensorError>(|_, v| Ok(v.log_softmax()?.pick(0)), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }
}
