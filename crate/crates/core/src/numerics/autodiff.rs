//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its value and the indices of its
//! inputs. Nodes only ever reference earlier nodes, so walking the node list
//! backwards is a reverse topological order and each node is visited once.

use std::cell::RefCell;
use std::ops;

use super::Tensor;
use crate::error::{Error, Result};

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    MulRows(usize, usize),
    MulScalar(usize, usize),
    AddCol(usize, usize),
    SoftmaxCols(usize),
    Gelu(usize),
    Sigmoid(usize),
    CenterCols(usize),
    NormCols { x: usize, divisor: f64, eps: f64 },
    Sum(usize),
    Mean(usize),
    MeanCols(usize),
    Powi(usize, i32),
    Embed { table: usize, ids: Vec<usize> },
    CrossEntropy { logits: usize, labels: Vec<usize> },
    HStack(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded recording of a computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.idx, self.shape())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            idx: nodes.len() - 1,
        }
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Var<'_> {
        self.leaf(Tensor::scalar(v))
    }

    /// Gathers rows `ids` of `table` (V×d) as columns of a `d×N` matrix.
    pub fn embed<'t>(&'t self, table: Var<'t>, ids: &[usize]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let t = &nodes[table.idx].value;
            Tensor::from_fn(t.cols(), ids.len(), |r, c| t.get(ids[c], r))
        };
        self.push(
            value,
            Op::Embed {
                table: table.idx,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn hstack<'t>(&'t self, parts: &[Var<'t>]) -> Var<'t> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = parts.iter().map(|p| &nodes[p.idx].value).collect();
            Tensor::hstack(&refs).expect("hstack row mismatch")
        };
        self.push(value, Op::HStack(parts.iter().map(|p| p.idx).collect()))
    }

    fn value_of(&self, idx: usize) -> std::cell::Ref<'_, Tensor> {
        std::cell::Ref::map(self.nodes.borrow(), |n| &n[idx].value)
    }

    fn unary(&self, x: usize, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = f(&self.value_of(x));
        self.push(value, op)
    }

    fn binary(&self, a: usize, b: usize, f: impl FnOnce(&Tensor, &Tensor) -> Tensor, op: Op) -> Var<'_> {
        let value = {
            let nodes = self.nodes.borrow();
            f(&nodes[a].value, &nodes[b].value)
        };
        self.push(value, op)
    }

    /// Adjoints of `output` with respect to every node, indexed by node id.
    fn backward(&self, output: usize) -> Vec<Option<Tensor>> {
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor>> = vec![None; output + 1];
        grads[output] = Some(Tensor::ones(nodes[output].value.rows(), nodes[output].value.cols()));
        for i in (0..=output).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            let val = |k: usize| &nodes[k].value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.mmt(val(*b)));
                    accumulate(&mut grads, *b, val(*a).tmm(&g));
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    accumulate(&mut grads, *a, g.zip(val(*b), |x, y| x * y));
                    accumulate(&mut grads, *b, g.zip(val(*a), |x, y| x * y));
                }
                Op::Scale(a, c) => accumulate(&mut grads, *a, g.scale(*c)),
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::MulRows(x, z) => {
                    let xv = val(*x);
                    let zv = val(*z);
                    accumulate(&mut grads, *x, g.scale_rows(zv.data()).unwrap());
                    let dz: Vec<f64> = (0..xv.rows())
                        .map(|r| xv.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum())
                        .collect();
                    accumulate(&mut grads, *z, Tensor::column(&dz));
                }
                Op::MulScalar(x, s) => {
                    let sv = val(*s).data()[0];
                    let ds: f64 = val(*x).data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                    accumulate(&mut grads, *x, g.scale(sv));
                    accumulate(&mut grads, *s, Tensor::scalar(ds));
                }
                Op::AddCol(x, b) => {
                    let db: Vec<f64> = (0..g.rows()).map(|r| g.row(r).iter().sum()).collect();
                    accumulate(&mut grads, *x, g.clone());
                    accumulate(&mut grads, *b, Tensor::column(&db));
                }
                Op::SoftmaxCols(x) => {
                    let y = &node.value;
                    let mut dx = Tensor::zeros(y.rows(), y.cols());
                    for c in 0..y.cols() {
                        let dot: f64 = (0..y.rows()).map(|r| g.get(r, c) * y.get(r, c)).sum();
                        for r in 0..y.rows() {
                            dx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Gelu(x) => {
                    accumulate(&mut grads, *x, g.zip(val(*x), |gg, xx| gg * gelu_grad(xx)));
                }
                Op::Sigmoid(x) => {
                    accumulate(&mut grads, *x, g.zip(&node.value, |gg, y| gg * y * (1.0 - y)));
                }
                Op::CenterCols(x) => accumulate(&mut grads, *x, g.center_columns()),
                Op::NormCols { x, divisor, eps } => {
                    let xv = val(*x);
                    let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                    for c in 0..xv.cols() {
                        let ss: f64 = (0..xv.rows()).map(|r| xv.get(r, c).powi(2)).sum();
                        let inv = 1.0 / (ss / divisor + eps).sqrt();
                        let dot: f64 = (0..xv.rows()).map(|r| xv.get(r, c) * g.get(r, c)).sum();
                        let k = inv * inv * inv / divisor * dot;
                        for r in 0..xv.rows() {
                            dx.set(r, c, inv * g.get(r, c) - k * xv.get(r, c));
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.data()[0]));
                }
                Op::Mean(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads, *x, Tensor::filled(r, c, g.data()[0] / (r * c) as f64));
                }
                Op::MeanCols(x) => {
                    let (r, c) = val(*x).shape();
                    let inv = 1.0 / c as f64;
                    accumulate(&mut grads, *x, Tensor::from_fn(r, c, |i, _| g.get(i, 0) * inv));
                }
                Op::Powi(x, p) => {
                    let p = *p;
                    accumulate(&mut grads, *x, g.zip(val(*x), |gg, xx| gg * p as f64 * xx.powi(p - 1)));
                }
                Op::Embed { table, ids } => {
                    let (vocab, d) = val(*table).shape();
                    let mut dt = Tensor::zeros(vocab, d);
                    for (j, &id) in ids.iter().enumerate() {
                        for r in 0..d {
                            let cur = dt.get(id, r);
                            dt.set(id, r, cur + g.get(r, j));
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::CrossEntropy { logits, labels } => {
                    let l = val(*logits);
                    let scale = g.data()[0] / labels.len() as f64;
                    let mut dl = softmax_columns(l);
                    for (b, &y) in labels.iter().enumerate() {
                        let cur = dl.get(y, b);
                        dl.set(y, b, cur - 1.0);
                    }
                    accumulate(&mut grads, *logits, dl.scale(scale));
                }
                Op::HStack(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = val(p).cols();
                        let idx: Vec<usize> = (off..off + w).collect();
                        accumulate(&mut grads, p, g.select_cols(&idx));
                        off += w;
                    }
                }
            }
            grads[i] = Some(g);
        }
        grads
    }
}

fn accumulate(grads: &mut [Option<Tensor>], idx: usize, g: Tensor) {
    match &mut grads[idx] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

/// Column-wise softmax with max subtraction.
pub fn softmax_columns(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for c in 0..x.cols() {
        let mx = (0..x.rows()).map(|r| x.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for r in 0..x.rows() {
            let e = (x.get(r, c) - mx).exp();
            y.set(r, c, e);
            z += e;
        }
        for r in 0..x.rows() {
            y.set(r, c, y.get(r, c) / z);
        }
    }
    y
}

/// `x / sqrt(‖x‖²/divisor + eps)` applied to every column.
pub fn norm_columns(x: &Tensor, divisor: f64, eps: f64) -> Tensor {
    let mut y = x.clone();
    for c in 0..x.cols() {
        let ss: f64 = (0..x.rows()).map(|r| x.get(r, c).powi(2)).sum();
        let inv = 1.0 / (ss / divisor + eps).sqrt();
        for r in 0..x.rows() {
            y.set(r, c, x.get(r, c) * inv);
        }
    }
    y
}

/// Mean cross-entropy over columns of `logits` (classes × batch).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let mx = (0..logits.rows())
            .map(|r| logits.get(r, b))
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = mx
            + (0..logits.rows())
                .map(|r| (logits.get(r, b) - mx).exp())
                .sum::<f64>()
                .ln();
        total += lse - logits.get(y, b);
    }
    total / labels.len() as f64
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.value_of(self.idx).clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.value_of(self.idx).shape()
    }

    /// Value of a `1×1` node.
    pub fn item(&self) -> f64 {
        let v = self.tape.value_of(self.idx);
        assert_eq!(v.shape(), (1, 1), "item() on non-scalar");
        v.data()[0]
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.tape
            .binary(self.idx, other.idx, |a, b| a.mm(b), Op::MatMul(self.idx, other.idx))
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.tape.unary(self.idx, |x| x.scale(c), Op::Scale(self.idx, c))
    }

    pub fn t(self) -> Var<'t> {
        self.tape.unary(self.idx, Tensor::transpose, Op::Transpose(self.idx))
    }

    /// `diag(z)·self` with `z` an `m×1` column.
    pub fn mul_rows(self, z: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            z.idx,
            |x, z| {
                assert_eq!(z.shape(), (x.rows(), 1), "mul_rows mask shape");
                x.scale_rows(z.data()).unwrap()
            },
            Op::MulRows(self.idx, z.idx),
        )
    }

    /// `s·self` with `s` a `1×1` node.
    pub fn mul_scalar(self, s: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            s.idx,
            |x, s| {
                assert_eq!(s.shape(), (1, 1), "mul_scalar expects 1x1");
                x.scale(s.data()[0])
            },
            Op::MulScalar(self.idx, s.idx),
        )
    }

    pub fn add_col(self, b: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            b.idx,
            |x, b| x.add_col(b).expect("add_col shape"),
            Op::AddCol(self.idx, b.idx),
        )
    }

    pub fn softmax_cols(self) -> Var<'t> {
        self.tape.unary(self.idx, softmax_columns, Op::SoftmaxCols(self.idx))
    }

    pub fn gelu(self) -> Var<'t> {
        self.tape.unary(self.idx, |x| x.map(gelu), Op::Gelu(self.idx))
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.idx, |x| x.map(sigmoid), Op::Sigmoid(self.idx))
    }

    pub fn center_cols(self) -> Var<'t> {
        self.tape
            .unary(self.idx, Tensor::center_columns, Op::CenterCols(self.idx))
    }

    pub fn norm_cols(self, divisor: f64, eps: f64) -> Var<'t> {
        self.tape.unary(
            self.idx,
            |x| norm_columns(x, divisor, eps),
            Op::NormCols {
                x: self.idx,
                divisor,
                eps,
            },
        )
    }

    /// Column-wise layer normalization without affine parameters.
    pub fn layer_norm_cols(self, eps: f64) -> Var<'t> {
        let d = self.shape().0 as f64;
        self.center_cols().norm_cols(d, eps)
    }

    /// Column-wise RMS normalization without affine parameters.
    pub fn rms_norm_cols(self, eps: f64) -> Var<'t> {
        let d = self.shape().0 as f64;
        self.norm_cols(d, eps)
    }

    pub fn sum(self) -> Var<'t> {
        self.tape
            .unary(self.idx, |x| Tensor::scalar(x.sum()), Op::Sum(self.idx))
    }

    pub fn mean(self) -> Var<'t> {
        self.tape.unary(
            self.idx,
            |x| Tensor::scalar(x.sum() / x.len() as f64),
            Op::Mean(self.idx),
        )
    }

    pub fn mean_cols(self) -> Var<'t> {
        self.tape.unary(
            self.idx,
            |x| {
                let n = x.cols() as f64;
                Tensor::from_fn(x.rows(), 1, |r, _| x.row(r).iter().sum::<f64>() / n)
            },
            Op::MeanCols(self.idx),
        )
    }

    pub fn powi(self, p: i32) -> Var<'t> {
        self.tape
            .unary(self.idx, |x| x.map(|v| v.powi(p)), Op::Powi(self.idx, p))
    }

    pub fn cross_entropy(self, labels: &[usize]) -> Var<'t> {
        self.tape.unary(
            self.idx,
            |l| {
                assert_eq!(l.cols(), labels.len(), "one label per logit column");
                Tensor::scalar(cross_entropy(l, labels))
            },
            Op::CrossEntropy {
                logits: self.idx,
                labels: labels.to_vec(),
            },
        )
    }
}

impl<'t> ops::Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            rhs.idx,
            |a, b| a.zip(b, |x, y| x + y),
            Op::Add(self.idx, rhs.idx),
        )
    }
}

impl<'t> ops::Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            rhs.idx,
            |a, b| a.zip(b, |x, y| x - y),
            Op::Sub(self.idx, rhs.idx),
        )
    }
}

impl<'t> ops::Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Var<'t>) -> Var<'t> {
        self.tape.binary(
            self.idx,
            rhs.idx,
            |a, b| a.zip(b, |x, y| x * y),
            Op::Mul(self.idx, rhs.idx),
        )
    }
}

/// `∂f/∂p` for every `p` in `params`. `f` must be a `1×1` node on the same
/// tape.
pub fn grad<'t>(f: Var<'t>, params: &[Var<'t>]) -> Result<Vec<Tensor>> {
    let shape = f.shape();
    if shape != (1, 1) {
        return Err(Error::Contract(format!(
            "gradient requested of a non-scalar {}x{} expression",
            shape.0, shape.1
        )));
    }
    if params.iter().any(|p| !std::ptr::eq(p.tape, f.tape)) {
        return Err(Error::Contract("parameter recorded on a different tape".into()));
    }
    let grads = f.tape.backward(f.idx);
    let nodes = f.tape.nodes.borrow();
    Ok(params
        .iter()
        .map(|p| {
            grads.get(p.idx).and_then(Clone::clone).unwrap_or_else(|| {
                let (r, c) = nodes[p.idx].value.shape();
                Tensor::zeros(r, c)
            })
        })
        .collect())
}
