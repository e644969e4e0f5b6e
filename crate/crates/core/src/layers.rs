//! Transformer building blocks.
//!
//! Every block has a taped forward (`forward`, used for training and
//! gradient checks) and, where incremental decoding needs it, a plain
//! tensor path (`apply`) that records nothing.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};
use crate::tensorcore::{Binder, ParamId, ParamStore, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub fn xavier_uniform(rng: &mut impl Rng, d_in: usize, d_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (d_in + d_out) as f64).sqrt();
    let dist = Uniform::new_inclusive(-a, a).expect("valid range");
    let data = (0..d_in * d_out).map(|_| dist.sample(rng)).collect();
    Tensor::new(vec![d_in, d_out], data).expect("shape matches")
}

/// Affine map `x·W + b` with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self::with_weight(store, name, xavier_uniform(rng, d_in, d_out, 1.0))
    }

    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        Self::with_weight(store, name, Tensor::zeros(&[d_in, d_out]))
    }

    pub fn with_weight(store: &mut ParamStore, name: &str, w: Tensor) -> Self {
        let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
        let w = store.add(format!("{name}.w"), w);
        let b = store.add(format!("{name}.b"), Tensor::zeros(&[d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(bd.param(self.w))?.add_row(bd.param(self.b))?)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(store.get(self.w))?.add_row(store.get(self.b))?)
    }

    pub fn num_params(&self) -> usize {
        self.d_in * self.d_out + self.d_out
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(&[dim]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]));
        Self { gamma, beta, dim }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        Ok(x.layer_norm(bd.param(self.gamma), bd.param(self.beta), LN_EPS)?)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let g = store.get(self.gamma).data();
        let b = store.get(self.beta).data();
        let c = x.cols();
        let mut out = x.clone();
        for r in 0..x.rows() {
            let row = x.row_slice(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            for (j, o) in out.row_slice_mut(r).iter_mut().enumerate() {
                *o = (row[j] - mean) * is * g[j] + b[j];
            }
        }
        out
    }

    pub fn num_params(&self) -> usize {
        2 * self.dim
    }
}

/// Sinusoidal positions: `PE[t][2i] = sin(t / 10000^(2i/d))`, `PE[t][2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = Tensor::zeros(&[len, d]);
    for t in 0..len {
        let row = pe.row_slice_mut(t);
        for i in (0..d).step_by(2) {
            let angle = t as f64 / 10000f64.powf(i as f64 / d as f64);
            row[i] = angle.sin();
            if i + 1 < d {
                row[i + 1] = angle.cos();
            }
        }
    }
    pe
}

/// Additive mask: `-inf` above the diagonal.
pub fn causal_mask(len: usize) -> Tensor {
    let mut m = Tensor::zeros(&[len, len]);
    for i in 0..len {
        for j in i + 1..len {
            m.data_mut()[i * len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Additive mask hiding keys at positions `>= valid`.
pub fn key_padding_mask(query_len: usize, key_len: usize, valid: usize) -> Tensor {
    let mut m = Tensor::zeros(&[query_len, key_len]);
    for i in 0..query_len {
        for j in valid.min(key_len)..key_len {
            m.data_mut()[i * key_len + j] = f64::NEG_INFINITY;
        }
    }
    m
}

/// Inverted dropout; a no-op unless the binder carries a dropout source.
pub struct Dropout {
    pub rate: f64,
    pub rng: RefCell<ChaCha8Rng>,
}

impl Dropout {
    pub fn apply<'t>(&self, x: Var<'t>) -> Result<Var<'t>> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let shape = x.shape();
        let keep = 1.0 - self.rate;
        let mut rng = self.rng.borrow_mut();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = x.tape().constant(Tensor::new(shape, mask)?);
        Ok(x.mul(m)?)
    }
}

/// Multi-head scaled dot-product attention.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, d_kv: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} heads do not divide attention dim {d}"
            )));
        }
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, rng),
            k: Linear::new(store, &format!("{name}.k"), d_kv, d, rng),
            v: Linear::new(store, &format!("{name}.v"), d_kv, d, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, rng),
            heads,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.d_out
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// `query: Lq×d`, `key_value: Lk×d_kv`, optional additive `mask: Lq×Lk`.
    pub fn forward<'t>(
        &self,
        bd: &Binder<'t, '_>,
        query: Var<'t>,
        key_value: Var<'t>,
        mask: Option<&Tensor>,
    ) -> Result<Var<'t>> {
        let q = self.q.forward(bd, query)?;
        let k = self.k.forward(bd, key_value)?;
        let v = self.v.forward(bd, key_value)?;
        let (lq, lk) = (q.shape()[0], k.shape()[0]);
        let mask = match mask {
            Some(m) if m.shape() != [lq, lk] => {
                return Err(Error::Dimension(format!(
                    "attention mask {:?} does not match {lq}x{lk}",
                    m.shape()
                )))
            }
            Some(m) => Some(bd.tape().constant(m.clone())),
            None => None,
        };
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (q.slice_cols(h * dh, dh), k.slice_cols(h * dh, dh), v.slice_cols(h * dh, dh))
            };
            let mut scores = qh.matmul(kh.transpose())?.scale(scale);
            if let Some(m) = mask {
                scores = scores.add(m)?;
            }
            let p = scores.softmax()?;
            ctx.push(p.matmul(vh)?);
        }
        let joined = if ctx.len() == 1 { ctx[0] } else { Var::concat_cols(&ctx)? };
        self.o.forward(bd, joined)
    }

    /// Projects keys and values once so incremental decoding can reuse them.
    pub fn project_kv(&self, store: &ParamStore, key_value: &Tensor) -> Result<(Tensor, Tensor)> {
        Ok((self.k.apply(store, key_value)?, self.v.apply(store, key_value)?))
    }

    /// Attention for a single query row against pre-projected keys/values,
    /// of which only the first `valid` rows are visible.
    pub fn attend_row(&self, store: &ParamStore, query: &Tensor, keys: &Tensor, values: &Tensor, valid: usize) -> Result<Tensor> {
        let q = self.q.apply(store, query)?;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let d = self.dim();
        let mut ctx = vec![0.0; d];
        let mut scores = vec![0.0; valid];
        for h in 0..self.heads {
            let qh = &q.data()[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kr = &keys.row_slice(j)[h * dh..(h + 1) * dh];
                *s = qh.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                z += *s;
            }
            for (j, s) in scores.iter().enumerate() {
                let w = s / z;
                let vr = &values.row_slice(j)[h * dh..(h + 1) * dh];
                for (c, v) in ctx[h * dh..(h + 1) * dh].iter_mut().zip(vr) {
                    *c += w * v;
                }
            }
        }
        self.o.apply(store, &Tensor::new(vec![1, d], ctx)?)
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params() + self.k.num_params() + self.v.num_params() + self.o.num_params()
    }
}

/// Position-wise `W2·ReLU(W1·x)`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.l1"), d, hidden, rng),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, d, rng),
        }
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>, dropout: Option<&Dropout>) -> Result<Var<'t>> {
        let mut h = self.l1.forward(bd, x)?.relu();
        if let Some(d) = dropout {
            h = d.apply(h)?;
        }
        self.l2.forward(bd, h)
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let h = self.l1.apply(store, x)?.map(|v| v.max(0.0));
        self.l2.apply(store, &h)
    }

    pub fn num_params(&self) -> usize {
        self.l1.num_params() + self.l2.num_params()
    }
}

/// Frame stacking plus a linear projection: `T×F → ⌈T/s⌉×d`.
#[derive(Clone, Debug)]
pub struct FrontEnd {
    pub proj: Linear,
    pub stack: usize,
    pub feat_dim: usize,
}

impl FrontEnd {
    pub fn new(store: &mut ParamStore, name: &str, feat_dim: usize, stack: usize, d: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, &format!("{name}.proj"), feat_dim * stack, d, rng),
            stack,
            feat_dim,
        }
    }

    pub fn output_len(&self, frames: usize) -> usize {
        frames.div_ceil(self.stack)
    }

    pub fn forward<'t>(&self, bd: &Binder<'t, '_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.feat_dim {
            return Err(Error::Dimension(format!(
                "front-end expects T x {} features, got {:?}",
                self.feat_dim, shape
            )));
        }
        let t = shape[0];
        let out_len = self.output_len(t);
        let pad = out_len * self.stack - t;
        let x = if pad > 0 {
            let zeros = bd.tape().constant(Tensor::zeros(&[pad, self.feat_dim]));
            Var::concat_rows(&[x, zeros])?
        } else {
            x
        };
        let stacked = x.reshape(&[out_len, self.feat_dim * self.stack])?;
        self.proj.forward(bd, stacked)
    }
}
