use std::cell::{Cell, Ref, RefCell};

use super::tensor::{log_softmax_row, Tensor};
use super::TensorError;

/// Storage precision for values recorded on a tape.
///
/// `Single` rounds every recorded value through `f32`; arithmetic itself stays
/// in `f64`, so results are deterministic on every platform.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Double,
    Single,
}

thread_local! {
    static PRECISION: Cell<Precision> = const { Cell::new(Precision::Double) };
}

pub fn precision() -> Precision {
    PRECISION.with(Cell::get)
}

pub fn set_precision(p: Precision) {
    PRECISION.with(|c| c.set(p));
}

/// Runs `f` with the given precision and restores the previous setting.
pub fn with_precision<R>(p: Precision, f: impl FnOnce() -> R) -> R {
    let prev = precision();
    set_precision(p);
    let out = f();
    set_precision(prev);
    out
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    Scale(usize, f64),
    Relu(usize),
    Exp(usize),
    Softmax(usize),
    LogSoftmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Transpose(usize),
    SliceCols {
        x: usize,
        start: usize,
    },
    SliceRows {
        x: usize,
        start: usize,
    },
    ConcatCols(Vec<usize>),
    ConcatRows(Vec<usize>),
    Reshape(usize),
    Gather {
        table: usize,
        ids: Vec<usize>,
    },
    Sum(usize),
    DotConst(usize, Tensor),
    /// Loss node whose gradient w.r.t. its input was computed in the forward pass.
    Custom(usize, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order by
/// construction. A tape built with [`Tape::no_grad`] stores values only.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. `v`; `None` when `v` does not reach the root.
    pub fn get(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: true,
        }
    }

    pub fn no_grad() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf (input or parameter).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    fn push(&self, mut value: Tensor, op: Op) -> Var<'_> {
        if precision() == Precision::Single {
            value.round_to_f32();
        }
        let op = if self.grad_enabled { op } else { Op::Leaf };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value_of(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var<'_>) -> Result<Gradients, TensorError> {
        if !std::ptr::eq(root.tape, self) {
            return Err(TensorError::Contract("root belongs to a different tape"));
        }
        if !self.grad_enabled {
            return Err(TensorError::Contract("backward on a no-grad tape"));
        }
        let nodes = self.nodes.borrow();
        if !nodes[root.id].value.is_scalar() {
            return Err(TensorError::NonScalarRoot(nodes[root.id].value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.id + 1];
        grads[root.id] = Some(Tensor::filled(nodes[root.id].value.shape(), 1.0));
        for id in (0..=root.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            backprop(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn backprop(
    nodes: &[Node],
    node: &Node,
    g: &Tensor,
    grads: &mut [Option<Tensor>],
) -> Result<(), TensorError> {
    let val = |id: usize| &nodes[id].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            // dA = dC·Bᵀ, dB = Aᵀ·dC
            let da = g.matmul_t(val(*b))?;
            let db = val(*a).t_matmul(g)?;
            accumulate(grads, *a, da.reshape(val(*a).shape())?);
            accumulate(grads, *b, db);
        }
        Op::Add(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.clone());
        }
        Op::Sub(a, b) => {
            accumulate(grads, *a, g.clone());
            accumulate(grads, *b, g.scale(-1.0));
        }
        Op::Mul(a, b) => {
            accumulate(grads, *a, g.mul(val(*b))?);
            accumulate(grads, *b, g.mul(val(*a))?);
        }
        Op::AddRow(a, row) => {
            accumulate(grads, *a, g.clone());
            let c = g.cols();
            let mut gr = vec![0.0; c];
            for chunk in g.data().chunks(c) {
                for (s, v) in gr.iter_mut().zip(chunk) {
                    *s += v;
                }
            }
            accumulate(grads, *row, Tensor::new(val(*row).shape().to_vec(), gr)?);
        }
        Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
        Op::Relu(a) => {
            // Subgradient at 0 is 0.
            let x = val(*a);
            let d = g.zip_with(x, "relu_grad", |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
            accumulate(grads, *a, d);
        }
        Op::Exp(a) => accumulate(grads, *a, g.mul(&node.value)?),
        Op::Softmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..c {
                    d[r * c + j] = yr[j] * (gr[j] - dot);
                }
            }
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
        }
        Op::LogSoftmax(a) => {
            let y = &node.value;
            let c = y.cols();
            let mut d = vec![0.0; y.len()];
            for r in 0..y.rows() {
                let yr = y.row_slice(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let gs: f64 = gr.iter().sum();
                for j in 0..c {
                    d[r * c + j] = gr[j] - yr[j].exp() * gs;
                }
            }
            accumulate(grads, *a, Tensor::new(y.shape().to_vec(), d)?);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let c = xhat.cols();
            let gm = val(*gamma).data();
            let mut dx = vec![0.0; xhat.len()];
            let mut dg = vec![0.0; c];
            let mut db = vec![0.0; c];
            for r in 0..xhat.rows() {
                let xh = xhat.row_slice(r);
                let gr = &g.data()[r * c..(r + 1) * c];
                let mut mean_dxh = 0.0;
                let mut mean_dxh_xh = 0.0;
                for j in 0..c {
                    let dxh = gr[j] * gm[j];
                    mean_dxh += dxh;
                    mean_dxh_xh += dxh * xh[j];
                    dg[j] += gr[j] * xh[j];
                    db[j] += gr[j];
                }
                mean_dxh /= c as f64;
                mean_dxh_xh /= c as f64;
                for j in 0..c {
                    let dxh = gr[j] * gm[j];
                    dx[r * c + j] = inv_std[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
                }
            }
            accumulate(grads, *x, Tensor::new(val(*x).shape().to_vec(), dx)?);
            accumulate(grads, *gamma, Tensor::new(val(*gamma).shape().to_vec(), dg)?);
            accumulate(grads, *beta, Tensor::new(val(*beta).shape().to_vec(), db)?);
        }
        Op::Transpose(a) => accumulate(grads, *a, g.transpose()),
        Op::SliceCols { x, start } => {
            let src = val(*x);
            let (m, n) = (src.rows(), src.cols());
            let len = g.cols();
            let mut d = vec![0.0; m * n];
            for i in 0..m {
                d[i * n + start..i * n + start + len].copy_from_slice(g.row_slice(i));
            }
            accumulate(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
        }
        Op::SliceRows { x, start } => {
            let src = val(*x);
            let n = src.cols();
            let mut d = vec![0.0; src.len()];
            d[start * n..start * n + g.len()].copy_from_slice(g.data());
            accumulate(grads, *x, Tensor::new(src.shape().to_vec(), d)?);
        }
        Op::ConcatCols(parts) => {
            let mut off = 0;
            for &p in parts {
                let w = val(p).cols();
                accumulate(grads, p, g.slice_cols(off, w));
                off += w;
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for &p in parts {
                let h = val(p).rows();
                accumulate(grads, p, g.slice_rows(off, h).reshape(val(p).shape())?);
                off += h;
            }
        }
        Op::Reshape(a) => accumulate(grads, *a, g.reshape(val(*a).shape())?),
        Op::Gather { table, ids } => {
            let t = val(*table);
            let c = t.cols();
            let mut d = vec![0.0; t.len()];
            for (r, &id) in ids.iter().enumerate() {
                for j in 0..c {
                    d[id * c + j] += g.data()[r * c + j];
                }
            }
            accumulate(grads, *table, Tensor::new(t.shape().to_vec(), d)?);
        }
        Op::Sum(a) => {
            let s = g.item();
            accumulate(grads, *a, Tensor::filled(val(*a).shape(), s));
        }
        Op::DotConst(a, c) => {
            let s = g.item();
            accumulate(grads, *a, c.scale(s));
        }
        Op::Custom(a, local) => {
            let s = g.item();
            accumulate(grads, *a, local.scale(s));
        }
    }
    Ok(())
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the recorded value. Drop it before recording further ops.
    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value_of(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "vars from different tapes"
        );
    }

    fn unary(&self, op: Op, f: impl FnOnce(&Tensor) -> Result<Tensor, TensorError>) -> Result<Var<'t>, TensorError> {
        let out = f(&self.value())?;
        Ok(self.tape.push(out, op))
    }

    fn binary(
        &self,
        other: Var<'t>,
        op: Op,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor, TensorError>,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other);
        let out = f(&self.value(), &other.value())?;
        Ok(self.tape.push(out, op))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, Op::MatMul(self.id, other.id), |a, b| a.matmul(b))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| a.add(b))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| a.sub(b))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| a.mul(b))
    }

    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(row, Op::AddRow(self.id, row.id), |a, b| a.add_row(b))
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        let out = self.value().scale(s);
        self.tape.push(out, Op::Scale(self.id, s))
    }

    pub fn relu(&self) -> Var<'t> {
        let out = self.value().map(|v| v.max(0.0));
        self.tape.push(out, Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        let out = self.value().map(f64::exp);
        self.tape.push(out, Op::Exp(self.id))
    }

    /// Softmax over the last axis. A row that is entirely `-inf` yields zeros.
    pub fn softmax(&self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Softmax(self.id), |x| x.softmax_rows())
    }

    pub fn log_softmax(&self) -> Result<Var<'t>, TensorError> {
        self.unary(Op::LogSoftmax(self.id), |x| {
            x.check_not_nan("log_softmax")?;
            let mut out = x.clone();
            let c = x.cols();
            for (src, dst) in x.data().chunks(c).zip(out.data_mut().chunks_mut(c)) {
                log_softmax_row(src, dst);
            }
            Ok(out)
        })
    }

    /// Normalizes each row to zero mean / unit variance, then applies `gamma`, `beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>, TensorError> {
        self.same_tape(&gamma);
        let (out, xhat, inv_std) = {
            let x = self.value();
            let g = gamma.value();
            let b = beta.value();
            let c = x.cols();
            if g.len() != c || b.len() != c {
                return Err(TensorError::shape("layer_norm", x.shape(), g.shape()));
            }
            let mut xhat = x.clone();
            let mut out = x.clone();
            let mut inv_std = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let row = x.row_slice(r);
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std.push(is);
                let xh = xhat.row_slice_mut(r);
                for j in 0..c {
                    xh[j] = (row[j] - mean) * is;
                }
                let o = out.row_slice_mut(r);
                for j in 0..c {
                    o[j] = xh[j] * g.data()[j] + b.data()[j];
                }
            }
            (out, xhat, inv_std)
        };
        Ok(self.tape.push(
            out,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn transpose(&self) -> Var<'t> {
        let out = self.value().transpose();
        self.tape.push(out, Op::Transpose(self.id))
    }

    pub fn slice_cols(&self, start: usize, len: usize) -> Var<'t> {
        let out = self.value().slice_cols(start, len);
        self.tape.push(out, Op::SliceCols { x: self.id, start })
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Var<'t> {
        let out = self.value().slice_rows(start, len);
        self.tape.push(out, Op::SliceRows { x: self.id, start })
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts[0].tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_cols(&refs)?
        };
        Ok(tape.push(out, Op::ConcatCols(parts.iter().map(|p| p.id).collect())))
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let tape = parts[0].tape;
        let out = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Tensor> = vals.iter().map(|r| &**r).collect();
            Tensor::concat_rows(&refs)?
        };
        Ok(tape.push(out, Op::ConcatRows(parts.iter().map(|p| p.id).collect())))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>, TensorError> {
        self.unary(Op::Reshape(self.id), |x| x.reshape(shape))
    }

    /// Row lookup: `out[r] = table[ids[r]]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Var<'t>, TensorError> {
        let out = {
            let t = self.value();
            let n = t.rows();
            if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
                return Err(TensorError::IndexOutOfRange { index: bad, len: n });
            }
            let c = t.cols();
            let mut d = Vec::with_capacity(ids.len() * c);
            for &i in ids {
                d.extend_from_slice(t.row_slice(i));
            }
            Tensor::new(vec![ids.len(), c], d)?
        };
        Ok(self.tape.push(
            out,
            Op::Gather {
                table: self.id,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        let s = self.value().sum();
        self.tape.push(Tensor::scalar(s), Op::Sum(self.id))
    }

    /// `Σ self ⊙ c` for a constant `c` of identical shape. Entries where `c`
    /// is zero contribute nothing, even if `self` is infinite there.
    pub fn dot_const(&self, c: &Tensor) -> Result<Var<'t>, TensorError> {
        let s = {
            let v = self.value();
            if v.shape() != c.shape() {
                return Err(TensorError::shape("dot_const", v.shape(), c.shape()));
            }
            v.data()
                .iter()
                .zip(c.data())
                .filter(|(_, &b)| b != 0.0)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        Ok(self.tape.push(Tensor::scalar(s), Op::DotConst(self.id, c.clone())))
    }

    /// Picks one element as a scalar.
    pub fn pick(&self, index: usize) -> Var<'t> {
        let (s, mask) = {
            let v = self.value();
            let mut mask = Tensor::zeros(v.shape());
            mask.data_mut()[index] = 1.0;
            (v.data()[index], mask)
        };
        self.tape.push(Tensor::scalar(s), Op::DotConst(self.id, mask))
    }

    /// Records a scalar whose gradient w.r.t. `self` is already known.
    pub fn custom_scalar(&self, value: f64, local_grad: Tensor) -> Result<Var<'t>, TensorError> {
        if local_grad.shape() != self.value().shape() {
            return Err(TensorError::shape("custom_scalar", local_grad.shape(), self.value().shape()));
        }
        Ok(self.tape.push(Tensor::scalar(value), Op::Custom(self.id, local_grad)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let g = tape.backward(x.sum()).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn square_gradient_is_two_x() {
        let tape = Tape::new();
        let data = Tensor::row(&[0.3, -1.2, 2.0]);
        let x = tape.leaf(data.clone());
        let root = x.mul(x).unwrap().sum();
        let g = tape.backward(root).unwrap();
        assert_eq!(g.get(x).unwrap(), &data.scale(2.0));
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn unreachable_leaf_has_no_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[2]));
        let y = tape.leaf(Tensor::ones(&[2]));
        let g = tape.backward(x.sum()).unwrap();
        assert!(g.get(y).is_none());
    }

    #[test]
    fn identity_matmul_and_linear_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::identity(2));
        let b = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let c = a.matmul(b).unwrap();
        assert_eq!(&*c.value(), &*b.value());
        let g = tape.backward(c.sum()).unwrap();
        // dA = 1·Bᵀ row sums, dB = Aᵀ·1
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 7.0, 3.0, 7.0]);
        assert_eq!(g.get(b).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.leaf(Tensor::ones(&[2, 3]));
        let b = tape.leaf(Tensor::ones(&[2, 3]));
        let err = a.matmul(b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn no_grad_tape_refuses_backward() {
        let tape = Tape::no_grad();
        let x = tape.leaf(Tensor::ones(&[1]));
        assert!(tape.backward(x.sum()).is_err());
    }

    #[test]
    fn single_precision_rounds_recorded_values() {
        with_precision(Precision::Single, || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(0.1));
            assert_eq!(x.item(), 0.1f32 as f64);
        });
        let tape = Tape::new();
        assert_eq!(tape.leaf(Tensor::scalar(0.1)).item(), 0.1);
    }

    #[test]
    fn softmax_and_log_softmax_basic_values() {
        let t = Tensor::row(&[0.0, 0.0]);
        assert_eq!(t.softmax_rows().unwrap().data(), &[0.5, 0.5]);
        let p = Tensor::row(&[1.0, 2.0, 3.0]).softmax_rows().unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, v) in [1.0f64, 2.0, 3.0].iter().enumerate() {
            assert!((p.data()[i] - v.exp() / z).abs() < 1e-15);
        }
        assert!((p.data()[0] - 0.0900).abs() < 1e-4);
        assert!((p.data()[1] - 0.2447).abs() < 1e-4);
        assert!((p.data()[2] - 0.6652).abs() < 1e-4);
        let shifted = Tensor::row(&[101.0, 102.0, 103.0]).softmax_rows().unwrap();
        assert!(shifted.max_abs_diff(&p) < 1e-15);
        let ls = Tensor::row(&[1.0, 2.0, 3.0]).log_softmax_rows().unwrap();
        assert!(ls.max_abs_diff(&p.map(f64::ln)) < 1e-12);
        assert!(Tensor::row(&[f64::NAN, 1.0]).softmax_rows().is_err());
    }

    #[test]
    fn fully_masked_softmax_row_is_zero() {
        let t = Tensor::row(&[f64::NEG_INFINITY, f64::NEG_INFINITY]);
        assert_eq!(t.softmax_rows().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_degenerate_cases() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::row(&[2.0, 2.0, 2.0, 2.0]));
        let one = tape.leaf(Tensor::ones(&[4]));
        let zero = tape.leaf(Tensor::zeros(&[4]));
        let y = x.layer_norm(one, zero, 1e-5).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
        let x = tape.leaf(Tensor::row(&[1.0, -3.0, 0.5, 7.0]));
        let beta = tape.leaf(Tensor::row(&[0.1, 0.2, 0.3, 0.4]));
        let y = x.layer_norm(zero, beta, 1e-5).unwrap();
        assert_eq!(y.value().data(), beta.value().data());
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::from_rows(&[vec![0.1, 0.7, -0.3], vec![1.1, -0.2, 0.4]]).unwrap());
            let w = tape.leaf(Tensor::from_rows(&[vec![0.5, -1.0], vec![0.25, 0.3], vec![-0.7, 0.9]]).unwrap());
            let y = x.matmul(w).unwrap().relu().log_softmax().unwrap().sum();
            let g = tape.backward(y).unwrap();
            (g.get(x).unwrap().clone(), g.get(w).unwrap().clone())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.data().iter().zip(a2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(b1.data().iter().zip(b2.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}
