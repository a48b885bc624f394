use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use super::{
    log_sum_exp, sigmoid, softmax_rows, DiffusionSupports, Result, SparseMatrix, Tensor,
    TensorError,
};

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sigmoid(usize),
    Tanh(usize),
    ConcatCols(usize, usize),
    SliceCols(usize, usize),
    SpMM(Rc<SparseMatrix>, usize),
    Diffuse(Rc<DiffusionSupports>, usize),
    ScaleRows(usize, Rc<Vec<f64>>),
    Sum(usize),
    SoftmaxXent {
        logits: usize,
        targets: Vec<usize>,
        mask: Vec<usize>,
        probs: Tensor,
    },
    Mse {
        pred: usize,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records primitive operations for one training context.
///
/// A tape is single-threaded; independent contexts use independent tapes.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradients of a scalar loss with respect to every traced leaf.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
    visit_order: Vec<usize>,
}

impl Gradients {
    /// Gradient for `leaf`; leaves the loss does not depend on get zeros.
    pub fn wrt(&self, leaf: Var<'_>) -> Tensor {
        match self.by_leaf.get(&leaf.id) {
            Some(g) => g.clone(),
            None => {
                let v = leaf.value();
                Tensor::zeros(v.rows(), v.cols())
            }
        }
    }

    /// Node ids in the order the backward pass processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visit_order
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

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Trainable input; gradients are reported for it.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Constant, false)
    }

    fn node(&self, id: usize) -> Ref<'_, Node> {
        Ref::map(self.nodes.borrow(), |n| &n[id])
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if !nodes[loss.id].value.is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::scalar(1.0));
        let mut by_leaf = HashMap::new();
        let mut visit_order = Vec::new();

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            visit_order.push(id);
            let node = &nodes[id];
            let mut acc = |target: usize, delta: Tensor| {
                if !nodes[target].requires_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.add_assign(&delta),
                    slot @ None => *slot = Some(delta),
                }
            };
            match &node.op {
                Op::Leaf => {
                    by_leaf.insert(id, g);
                }
                Op::Constant => {}
                Op::MatMul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    if nodes[*a].requires_grad {
                        acc(*a, g.matmul(&bv.transpose())?);
                    }
                    if nodes[*b].requires_grad {
                        acc(*b, av.transpose().matmul(&g)?);
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone());
                    acc(*b, g);
                }
                Op::AddRow(a, b) => {
                    let cols = g.cols();
                    let mut col_sum = vec![0.0; cols];
                    for r in 0..g.rows() {
                        for (s, v) in col_sum.iter_mut().zip(g.row_slice(r)) {
                            *s += v;
                        }
                    }
                    acc(*b, Tensor::matrix(1, cols, col_sum));
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    acc(*b, g.scale(-1.0));
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    let av = &nodes[*a].value;
                    let bv = &nodes[*b].value;
                    acc(*a, g.zip_map(bv, "mul_grad", |x, y| x * y)?);
                    acc(*b, g.zip_map(av, "mul_grad", |x, y| x * y)?);
                }
                Op::Scale(a, s) => acc(*a, g.scale(*s)),
                Op::AddScalar(a) => acc(*a, g),
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    acc(
                        *a,
                        g.zip_map(y, "sigmoid_grad", |gg, yy| gg * yy * (1.0 - yy))?,
                    );
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    acc(
                        *a,
                        g.zip_map(y, "tanh_grad", |gg, yy| gg * (1.0 - yy * yy))?,
                    );
                }
                Op::ConcatCols(a, b) => {
                    let ca = nodes[*a].value.cols();
                    let cb = nodes[*b].value.cols();
                    let r = g.rows();
                    let mut ga = Vec::with_capacity(r * ca);
                    let mut gb = Vec::with_capacity(r * cb);
                    for i in 0..r {
                        let row = g.row_slice(i);
                        ga.extend_from_slice(&row[..ca]);
                        gb.extend_from_slice(&row[ca..]);
                    }
                    acc(*a, Tensor::matrix(r, ca, ga));
                    acc(*b, Tensor::matrix(r, cb, gb));
                }
                Op::SliceCols(a, start) => {
                    let src = &nodes[*a].value;
                    let (r, c) = (src.rows(), src.cols());
                    let w = g.cols();
                    let mut full = vec![0.0; r * c];
                    for i in 0..r {
                        full[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                    }
                    acc(*a, Tensor::matrix(r, c, full));
                }
                Op::SpMM(s, a) => acc(*a, s.transpose_mul_dense(&g)?),
                Op::Diffuse(s, a) => acc(*a, s.diffuse_t(&g)?),
                Op::ScaleRows(a, w) => {
                    let c = g.cols();
                    let mut out = g.into_data();
                    for (r, &wr) in w.iter().enumerate() {
                        for v in &mut out[r * c..(r + 1) * c] {
                            *v *= wr;
                        }
                    }
                    acc(*a, Tensor::matrix(w.len(), c, out));
                }
                Op::Sum(a) => {
                    let v = &nodes[*a].value;
                    acc(*a, Tensor::full(v.rows(), v.cols(), g.item()));
                }
                Op::SoftmaxXent {
                    logits,
                    targets,
                    mask,
                    probs,
                } => {
                    let scale = g.item() / mask.len() as f64;
                    let c = probs.cols();
                    let mut out = vec![0.0; probs.len()];
                    for &r in mask {
                        for j in 0..c {
                            let onehot = if targets[r] == j { 1.0 } else { 0.0 };
                            out[r * c + j] += scale * (probs.get(r, j) - onehot);
                        }
                    }
                    acc(*logits, Tensor::matrix(probs.rows(), c, out));
                }
                Op::Mse { pred, target } => {
                    let pv = &nodes[*pred].value;
                    let n = pv.len() as f64;
                    let k = 2.0 * g.item() / n;
                    acc(*pred, pv.zip_map(target, "mse_grad", |p, t| k * (p - t))?);
                }
            }
        }
        Ok(Gradients {
            by_leaf,
            visit_order,
        })
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Tensor {
        self.tape.node(self.id).value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.node(self.id).value.shape().to_vec()
    }

    fn unary(&self, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let v = f(&self.tape.node(self.id).value);
        self.tape.push(v, op, self.tape.rg(self.id))
    }

    fn binary(
        &self,
        other: Var<'t>,
        f: impl FnOnce(&Tensor, &Tensor) -> Result<Tensor>,
        op: Op,
    ) -> Result<Var<'t>> {
        let v = {
            let a = self.tape.node(self.id);
            let b = self.tape.node(other.id);
            f(&a.value, &b.value)?
        };
        let rg = self.tape.rg(self.id) || self.tape.rg(other.id);
        Ok(self.tape.push(v, op, rg))
    }

    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.matmul(b), Op::MatMul(self.id, other.id))
    }

    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.add(b), Op::Add(self.id, other.id))
    }

    /// Adds a `1 x n` row to every row of `self`.
    pub fn add_row(&self, row: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            row,
            |a, b| {
                if b.rows() != 1 || b.cols() != a.cols() {
                    return Err(TensorError::Dimension {
                        op: "add_row",
                        left: a.shape().to_vec(),
                        right: b.shape().to_vec(),
                    });
                }
                let c = a.cols();
                let mut out = a.data().to_vec();
                for (i, v) in out.iter_mut().enumerate() {
                    *v += b.data()[i % c];
                }
                Ok(Tensor::matrix(a.rows(), c, out))
            },
            Op::AddRow(self.id, row.id),
        )
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, |a, b| a.sub(b), Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.zip_map(b, "mul", |x, y| x * y),
            Op::Mul(self.id, other.id),
        )
    }

    pub fn scale(&self, s: f64) -> Var<'t> {
        self.unary(|a| a.scale(s), Op::Scale(self.id, s))
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(|a| a.map(|v| v + s), Op::AddScalar(self.id))
    }

    /// `1 - self`
    pub fn one_minus(&self) -> Var<'t> {
        self.scale(-1.0).add_scalar(1.0)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(|a| a.map(sigmoid), Op::Sigmoid(self.id))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(|a| a.map(f64::tanh), Op::Tanh(self.id))
    }

    pub fn concat_cols(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            other,
            |a, b| a.concat_cols(b),
            Op::ConcatCols(self.id, other.id),
        )
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Var<'t>> {
        let v = {
            let a = &self.tape.node(self.id).value;
            if start >= end || end > a.cols() {
                return Err(TensorError::Contract(format!(
                    "slice [{start},{end}) of {} columns",
                    a.cols()
                )));
            }
            let w = end - start;
            let mut out = Vec::with_capacity(a.rows() * w);
            for i in 0..a.rows() {
                out.extend_from_slice(&a.row_slice(i)[start..end]);
            }
            Tensor::matrix(a.rows(), w, out)
        };
        Ok(self
            .tape
            .push(v, Op::SliceCols(self.id, start), self.tape.rg(self.id)))
    }

    /// `s * self` for a constant sparse `s`.
    pub fn spmm(&self, s: &Rc<SparseMatrix>) -> Result<Var<'t>> {
        let v = s.mul_dense(&self.tape.node(self.id).value)?;
        Ok(self
            .tape
            .push(v, Op::SpMM(Rc::clone(s), self.id), self.tape.rg(self.id)))
    }

    /// Diffusion convolution over constant supports; `self` holds one column block per support.
    pub fn diffuse(&self, s: &Rc<DiffusionSupports>) -> Result<Var<'t>> {
        let v = s.diffuse(&self.tape.node(self.id).value)?;
        Ok(self
            .tape
            .push(v, Op::Diffuse(Rc::clone(s), self.id), self.tape.rg(self.id)))
    }

    /// Multiplies row `r` by the constant `w[r]`.
    pub fn scale_rows(&self, w: &Rc<Vec<f64>>) -> Result<Var<'t>> {
        let v = {
            let a = &self.tape.node(self.id).value;
            if a.rows() != w.len() {
                return Err(TensorError::Dimension {
                    op: "scale_rows",
                    left: a.shape().to_vec(),
                    right: vec![w.len()],
                });
            }
            let c = a.cols();
            let mut out = a.data().to_vec();
            for (r, &wr) in w.iter().enumerate() {
                for x in &mut out[r * c..(r + 1) * c] {
                    *x *= wr;
                }
            }
            Tensor::matrix(a.rows(), c, out)
        };
        Ok(self.tape.push(
            v,
            Op::ScaleRows(self.id, Rc::clone(w)),
            self.tape.rg(self.id),
        ))
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(|a| Tensor::scalar(a.sum()), Op::Sum(self.id))
    }

    /// Mean over `mask` rows of `-log softmax(row)[target]`, fused with
    /// log-sum-exp so saturated logits stay finite.
    pub fn softmax_xent(&self, targets: &[usize], mask: &[usize]) -> Result<Var<'t>> {
        if mask.is_empty() {
            return Err(TensorError::Contract(
                "cross-entropy over an empty mask".into(),
            ));
        }
        let (loss, probs) = {
            let logits = &self.tape.node(self.id).value;
            if targets.len() != logits.rows() {
                return Err(TensorError::Dimension {
                    op: "softmax_xent",
                    left: logits.shape().to_vec(),
                    right: vec![targets.len()],
                });
            }
            let c = logits.cols();
            let mut total = 0.0;
            for &r in mask {
                if r >= logits.rows() || targets[r] >= c {
                    return Err(TensorError::Contract(format!(
                        "row {r} / target out of range for {:?}",
                        logits.shape()
                    )));
                }
                let row = logits.row_slice(r);
                total += log_sum_exp(row) - row[targets[r]];
            }
            (total / mask.len() as f64, softmax_rows(logits))
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits: self.id,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            self.tape.rg(self.id),
        ))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&self, target: &Tensor) -> Result<Var<'t>> {
        let loss = {
            let p = &self.tape.node(self.id).value;
            let d = p.sub(target)?;
            d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64
        };
        Ok(self.tape.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred: self.id,
                target: target.clone(),
            },
            self.tape.rg(self.id),
        ))
    }

    /// Value copy with no gradient path.
    pub fn detach(&self) -> Var<'t> {
        self.tape.constant(self.value())
    }
}
