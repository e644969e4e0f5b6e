use std::fmt;

use super::TensorError;

/// Dense row-major array of `f64` scalars.
///
/// Most of the model works on 2-D tensors (`rows × cols`); a 1-D tensor of
/// extent `n` is treated as a single row where a row is expected.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.contains(&0) || shape.iter().product::<usize>() != data.len() {
            return Err(TensorError::BadShape {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn row(values: &[f64]) -> Self {
        Self {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    /// Builds a `rows.len() × width` matrix; every row must have the same width.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let width = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * width);
        for r in rows {
            if r.len() != width {
                return Err(TensorError::BadShape {
                    shape: vec![rows.len(), width],
                    len: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), width], data)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of all leading extents (1 for a vector).
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_slice_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self, TensorError> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_with(
        &self,
        other: &Tensor,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape(op, &self.shape, &other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.zip_with(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::shape("add_assign", &self.shape, &other.shape));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds a length-`cols` row to every row.
    pub fn add_row(&self, row: &Tensor) -> Result<Self, TensorError> {
        let c = self.cols();
        if row.len() != c {
            return Err(TensorError::shape("add_row", &self.shape, &row.shape));
        }
        let mut out = self.clone();
        for chunk in out.data.chunks_mut(c) {
            for (a, b) in chunk.iter_mut().zip(&row.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    fn as_matrix(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }

    /// `self[m×k] · other[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (m, k) = self.as_matrix();
        let (k2, n) = other.as_matrix();
        if k != k2 || self.shape.len() > 2 || other.shape.len() != 2 {
            return Err(TensorError::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self[m×k] · other[n×k]ᵀ`, without materializing the transpose.
    pub fn matmul_t(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (m, k) = self.as_matrix();
        let (n, k2) = other.as_matrix();
        if k != k2 {
            return Err(TensorError::shape("matmul_t", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                out[i * n + j] = a_row.iter().zip(b_row).map(|(a, b)| a * b).sum();
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    /// `self[k×m]ᵀ · other[k×n]`.
    pub fn t_matmul(&self, other: &Tensor) -> Result<Self, TensorError> {
        let (k, m) = self.as_matrix();
        let (k2, n) = other.as_matrix();
        if k != k2 {
            return Err(TensorError::shape("t_matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Self {
        let (m, n) = self.as_matrix();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self {
            shape: vec![n, m],
            data: out,
        }
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Self {
        let (m, n) = self.as_matrix();
        assert!(start + len <= n, "column slice out of range");
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&self.data[i * n + start..i * n + start + len]);
        }
        Self {
            shape: vec![m, len],
            data: out,
        }
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Self {
        let (m, n) = self.as_matrix();
        assert!(start + len <= m, "row slice out of range");
        Self {
            shape: vec![len, n],
            data: self.data[start * n..(start + len) * n].to_vec(),
        }
    }

    pub fn concat_cols(parts: &[&Tensor]) -> Result<Self, TensorError> {
        let m = parts[0].rows();
        let total: usize = parts.iter().map(|p| p.cols()).sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                if p.rows() != m {
                    return Err(TensorError::shape("concat_cols", &parts[0].shape, &p.shape));
                }
                out.extend_from_slice(p.row_slice(i));
            }
        }
        Self::new(vec![m, total], out)
    }

    pub fn concat_rows(parts: &[&Tensor]) -> Result<Self, TensorError> {
        let n = parts[0].cols();
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            if p.cols() != n {
                return Err(TensorError::shape("concat_rows", &parts[0].shape, &p.shape));
            }
            out.extend_from_slice(&p.data);
            m += p.rows();
        }
        Self::new(vec![m, n], out)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn round_to_f32(&mut self) {
        for v in &mut self.data {
            *v = *v as f32 as f64;
        }
    }
}

/// Row-wise numerically stable softmax into `out`.
pub(crate) fn softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        // Fully masked row.
        out.iter_mut().for_each(|o| *o = 0.0);
        return;
    }
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

pub(crate) fn log_softmax_row(x: &[f64], out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
}

/// `log(exp(a) + exp(b))` that tolerates `-inf` operands.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

impl Tensor {
    pub fn softmax_rows(&self) -> Result<Self, TensorError> {
        self.check_not_nan("softmax")?;
        let mut out = self.clone();
        let c = self.cols();
        for (src, dst) in self.data.chunks(c).zip(out.data.chunks_mut(c)) {
            softmax_row(src, dst);
        }
        Ok(out)
    }

    pub fn log_softmax_rows(&self) -> Result<Self, TensorError> {
        self.check_not_nan("log_softmax")?;
        let mut out = self.clone();
        let c = self.cols();
        for (src, dst) in self.data.chunks(c).zip(out.data.chunks_mut(c)) {
            log_softmax_row(src, dst);
        }
        Ok(out)
    }

    pub(crate) fn check_not_nan(&self, op: &'static str) -> Result<(), TensorError> {
        if self.data.iter().any(|v| v.is_nan()) {
            return Err(TensorError::NonFinite { op });
        }
        Ok(())
    }
}
