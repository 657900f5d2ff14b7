//! Reverse-mode tape over dense `f64` matrices.
//!
//! Every operation appends a node whose value is computed eagerly. Nodes only
//! reference earlier nodes, so the tape order is already a topological order
//! and `backward` is a single reverse sweep.

use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Array2, Axis, Zip};

use super::params::{ParamId, ParamStore};
use super::AutodiffError;

pub type Matrix = Array2<f64>;

type Result<T> = std::result::Result<T, AutodiffError>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary elementwise op is expanded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Full,
    Row,
    Col,
    Scalar,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    Transpose(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, Range<usize>, Range<usize>),
    GatherRows(Var, Arc<Vec<usize>>),
    Sum(Var, Option<usize>),
    Softmax(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    RowDot(Var, Var),
    L2NormalizeRows(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<ParamId>,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when the loss
    /// does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// A single-threaded computation graph.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Matrix {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> (usize, usize) {
        self.nodes[var.0].value.dim()
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, var: Var) -> f64 {
        self.nodes[var.0].value[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, param: Option<ParamId>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, None, false)
    }

    /// Leaf that receives a gradient but is not backed by a parameter.
    pub fn variable(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, None, true)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let trainable = store.is_trainable(id);
        self.push(store.value(id).clone(), Op::Leaf, Some(id), trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.1 != sb.0 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), None, rg))
    }

    fn broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Ok(Broadcast::Full)
        } else if sb == (1, 1) {
            Ok(Broadcast::Scalar)
        } else if sb.0 == 1 && sb.1 == sa.1 {
            Ok(Broadcast::Row)
        } else if sb.1 == 1 && sb.0 == sa.0 {
            Ok(Broadcast::Col)
        } else {
            Err(AutodiffError::ShapeMismatch { op, lhs: sa, rhs: sb })
        }
    }

    /// `a + b`, where `b` may be a row vector, column vector or 1×1.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b, kind), None, rg))
    }

    /// `a - b` with the same broadcasting rules as [`Tape::add`].
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b, kind), None, rg))
    }

    /// Elementwise product with the same broadcasting rules as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let kind = self.broadcast("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b, kind), None, rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), None, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), None, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().to_owned();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), None, rg)
    }

    /// Concatenate along `axis` (0 stacks rows, 1 joins columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(AutodiffError::InvalidArgument(
                "concat needs at least one part and axis 0 or 1".into(),
            ));
        }
        let first = self.shape(parts[0]);
        let other = 1 - axis;
        for &p in &parts[1..] {
            let sp = self.shape(p);
            let (a, b) = if other == 0 { (first.0, sp.0) } else { (first.1, sp.1) };
            if a != b {
                return Err(AutodiffError::ShapeMismatch {
                    op: "concat",
                    lhs: first,
                    rhs: sp,
                });
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(axis), &views)
            .map_err(|e| AutodiffError::InvalidArgument(e.to_string()))?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), None, rg))
    }

    /// Stack 1×c row vectors into a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        self.concat(rows, 0)
    }

    pub fn slice(&mut self, a: Var, rows: Range<usize>, cols: Range<usize>) -> Result<Var> {
        let sa = self.shape(a);
        if rows.start > rows.end || cols.start > cols.end || rows.end > sa.0 || cols.end > sa.1 {
            return Err(AutodiffError::InvalidArgument(format!(
                "slice {rows:?}×{cols:?} out of bounds for {sa:?}"
            )));
        }
        let value = self
            .value(a)
            .slice(s![rows.clone(), cols.clone()])
            .to_owned();
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice(a, rows, cols), None, rg))
    }

    pub fn slice_cols(&mut self, a: Var, cols: Range<usize>) -> Result<Var> {
        let rows = self.shape(a).0;
        self.slice(a, 0..rows, cols)
    }

    pub fn slice_rows(&mut self, a: Var, rows: Range<usize>) -> Result<Var> {
        let cols = self.shape(a).1;
        self.slice(a, rows, 0..cols)
    }

    /// Select rows by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, index: Arc<Vec<usize>>) -> Result<Var> {
        let (rows, cols) = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument(format!(
                "gather index {bad} out of bounds for {rows} rows"
            )));
        }
        let src = self.value(a);
        let mut value = Matrix::zeros((index.len(), cols));
        for (out, &i) in value.outer_iter_mut().zip(index.iter()) {
            let mut out = out;
            out.assign(&src.row(i));
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::GatherRows(a, index), None, rg))
    }

    /// Sum over all entries (`None`, giving 1×1), rows (`Some(0)`, giving
    /// 1×c) or columns (`Some(1)`, giving r×1).
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let value = match axis {
            None => Matrix::from_elem((1, 1), self.value(a).sum()),
            Some(ax @ (0 | 1)) => self.value(a).sum_axis(Axis(ax)).insert_axis(Axis(ax)),
            Some(_) => return Err(AutodiffError::InvalidArgument("sum axis must be 0 or 1".into())),
        };
        let rg = self.rg(a);
        Ok(self.push(value, Op::Sum(a, axis), None, rg))
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        let (r, c) = self.shape(a);
        let n = match axis {
            None => r * c,
            Some(0) => r,
            Some(_) => c,
        };
        if n == 0 {
            return Err(AutodiffError::InvalidArgument("mean over an empty axis".into()));
        }
        let total = self.sum(a, axis)?;
        Ok(self.scale(total, 1.0 / n as f64))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax along `axis` restricted to entries where `mask` is true.
    /// Masked entries get probability 0; a lane with no unmasked entry is all
    /// zeros.
    pub fn masked_softmax(&mut self, a: Var, axis: usize, mask: &Array2<bool>) -> Result<Var> {
        if mask.dim() != self.shape(a) {
            return Err(AutodiffError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape(a),
                rhs: mask.dim(),
            });
        }
        self.softmax_impl(a, axis, Some(mask))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, mask: Option<&Array2<bool>>) -> Result<Var> {
        if axis > 1 {
            return Err(AutodiffError::InvalidArgument("softmax axis must be 0 or 1".into()));
        }
        if self.value(a).len_of(Axis(axis)) == 0 {
            return Err(AutodiffError::EmptySoftmax);
        }
        let mut value = self.value(a).clone();
        match mask {
            None => {
                for lane in value.lanes_mut(Axis(axis)) {
                    softmax_lane(lane, None);
                }
            }
            Some(mask) => {
                Zip::from(value.lanes_mut(Axis(axis)))
                    .and(mask.lanes(Axis(axis)))
                    .for_each(|lane, m| softmax_lane(lane, Some(m)));
            }
        }
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax(a, axis), None, rg))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid(a), None, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh(a), None, rg)
    }

    /// `max(0, x)` elementwise; the hinge of the margin loss.
    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu(a), None, rg)
    }

    /// Row-wise inner product of two equally shaped matrices, giving r×1.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_dot",
                lhs: sa,
                rhs: sb,
            });
        }
        let value = (self.value(a) * self.value(b))
            .sum_axis(Axis(1))
            .insert_axis(Axis(1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::RowDot(a, b), None, rg))
    }

    /// Inner product of two 1×d row vectors, giving 1×1.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).0 != 1 {
            return Err(AutodiffError::ShapeMismatch {
                op: "dot",
                lhs: self.shape(a),
                rhs: self.shape(b),
            });
        }
        self.row_dot(a, b)
    }

    /// Scale every row to unit Euclidean norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut value = self.value(a).clone();
        for mut row in value.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        let rg = self.rg(a);
        self.push(value, Op::L2NormalizeRows(a), None, rg)
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { shape: ls });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(Matrix::ones((1, 1)));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Run [`Tape::backward`] and add every parameter leaf's gradient into
    /// `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.backward(loss)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Some(id), Some(g)) = (node.param, grads.grads[i].as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let mut acc = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    acc(*a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b, kind) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, reduce_broadcast(g.clone(), *kind));
                }
            }
            Op::Sub(a, b, kind) => {
                acc(*a, g.clone());
                if self.rg(*b) {
                    acc(*b, -reduce_broadcast(g.clone(), *kind));
                }
            }
            Op::Mul(a, b, kind) => {
                if self.rg(*a) {
                    acc(*a, g * self.value(*b));
                }
                if self.rg(*b) {
                    acc(*b, reduce_broadcast(g * self.value(*a), *kind));
                }
            }
            Op::Scale(a, f) => acc(*a, g * *f),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Transpose(a) => acc(*a, g.t().to_owned()),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let extent = self.value(p).len_of(Axis(*axis));
                    if self.rg(p) {
                        let piece = if *axis == 0 {
                            g.slice(s![offset..offset + extent, ..]).to_owned()
                        } else {
                            g.slice(s![.., offset..offset + extent]).to_owned()
                        };
                        acc(p, piece);
                    }
                    offset += extent;
                }
            }
            Op::Slice(a, rows, cols) => {
                let mut full = Matrix::zeros(self.shape(*a));
                full.slice_mut(s![rows.clone(), cols.clone()]).assign(g);
                acc(*a, full);
            }
            Op::GatherRows(a, index) => {
                let mut full = Matrix::zeros(self.shape(*a));
                for (grow, &i) in g.outer_iter().zip(index.iter()) {
                    let mut dst = full.row_mut(i);
                    dst += &grow;
                }
                acc(*a, full);
            }
            Op::Sum(a, axis) => {
                let target = self.shape(*a);
                let full = match axis {
                    None => Matrix::from_elem(target, g[[0, 0]]),
                    Some(_) => g
                        .broadcast(target)
                        .expect("sum gradient broadcasts to its input")
                        .to_owned(),
                };
                acc(*a, full);
            }
            Op::Softmax(a, axis) => {
                let y = &node.value;
                let mut dx = g * y;
                Zip::from(dx.lanes_mut(Axis(*axis)))
                    .and(y.lanes(Axis(*axis)))
                    .for_each(|mut lane, ylane| {
                        // lane currently holds g*y; dx = g*y - y * sum(g*y)
                        let total = lane.sum();
                        lane.zip_mut_with(&ylane, |d, &yy| *d -= yy * total);
                    });
                acc(*a, dx);
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|v| v * (1.0 - v)));
            }
            Op::Tanh(a) => {
                let y = &node.value;
                acc(*a, g * &y.mapv(|v| 1.0 - v * v));
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut dx = g.clone();
                dx.zip_mut_with(x, |d, &xv| {
                    if xv <= 0.0 {
                        *d = 0.0;
                    }
                });
                acc(*a, dx);
            }
            Op::RowDot(a, b) => {
                if self.rg(*a) {
                    acc(*a, self.value(*b) * g);
                }
                if self.rg(*b) {
                    acc(*b, self.value(*a) * g);
                }
            }
            Op::L2NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut dx = Matrix::zeros(x.dim());
                for ((mut d, xr), (yr, gr)) in dx
                    .outer_iter_mut()
                    .zip(x.outer_iter())
                    .zip(y.outer_iter().zip(g.outer_iter()))
                {
                    let norm = xr.dot(&xr).sqrt();
                    if norm > 0.0 {
                        let proj = yr.dot(&gr);
                        d.assign(&((&gr - &(&yr * proj)) / norm));
                    }
                }
                acc(*a, dx);
            }
        }
    }
}

fn reduce_broadcast(g: Matrix, kind: Broadcast) -> Matrix {
    match kind {
        Broadcast::Full => g,
        Broadcast::Row => g.sum_axis(Axis(0)).insert_axis(Axis(0)),
        Broadcast::Col => g.sum_axis(Axis(1)).insert_axis(Axis(1)),
        Broadcast::Scalar => Matrix::from_elem((1, 1), g.sum()),
    }
}

fn softmax_lane(mut lane: ndarray::ArrayViewMut1<f64>, mask: Option<ndarray::ArrayView1<bool>>) {
    let allowed = |i: usize| mask.as_ref().is_none_or(|m| m[i]);
    let max = lane
        .iter()
        .enumerate()
        .filter(|(i, _)| allowed(*i))
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        lane.fill(0.0);
        return;
    }
    let mut total = 0.0;
    for (i, v) in lane.iter_mut().enumerate() {
        if allowed(i) {
            *v = (*v - max).exp();
            total += *v;
        } else {
            *v = 0.0;
        }
    }
    lane.mapv_inplace(|v| v / total);
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
