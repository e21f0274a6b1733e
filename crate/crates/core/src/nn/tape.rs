//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation is evaluated eagerly and appended to the tape. Gradients
//! are computed by [`Tape::grad`], which records the backward pass on the
//! same tape using the same differentiable primitives. The gradient nodes it
//! returns are ordinary [`Var`]s, so a scalar built from them can be
//! differentiated again. That is how second-order quantities (gradients of a
//! loss evaluated after a gradient step) are obtained.
//!
//! ```
//! use iada::nn::{Tape, Tensor};
//!
//! let tape = Tape::<f64>::new();
//! let x = tape.leaf(Tensor::scalar(2.0));
//! let y = x.mul(x).unwrap().mul(x).unwrap(); // x³
//! let dy = tape.grad(y, &[x], None).unwrap()[0];
//! assert_eq!(dy.item(), 12.0);
//! let d2y = tape.grad(dy, &[x], None).unwrap()[0];
//! assert_eq!(d2y.item(), 12.0);
//! ```

use std::cell::{Ref, RefCell};
use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Constant,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId, T),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// `1×c` repeated to `n×c`.
    BroadcastRows(NodeId, usize),
    /// `n×1` repeated to `n×c`.
    BroadcastCols(NodeId, usize),
    /// `1×1` repeated to `r×c`.
    Expand(NodeId, usize, usize),
    SumRows(NodeId),
    SumCols(NodeId),
    SumAll(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    /// sign with sign(0) = 0; piecewise constant, zero gradient.
    Sign(NodeId),
    /// 1 where the input is positive, else 0; zero gradient.
    Step(NodeId),
    /// Row-wise log-sum-exp, `n×c` to `n×1`.
    LogSumExpRows(NodeId),
    /// `out[i] = a[i, idx[i]]`, `n×c` to `n×1`.
    GatherCols(NodeId, Arc<[usize]>),
    /// Adjoint of `GatherCols`: places `a[i]` at column `idx[i]`, `n×1` to `n×cols`.
    ScatterCols(NodeId, Arc<[usize]>, usize),
    /// `out[i, :] = a[idx[i], :]`.
    SelectRows(NodeId, Arc<[usize]>),
    /// Adjoint of `SelectRows`: `out[idx[i], :] += a[i, :]`, `rows` output rows.
    ScatterAddRows(NodeId, Arc<[usize]>, usize),
    StackRows(Arc<[NodeId]>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::BroadcastRows(..) => "broadcast_rows",
            Op::BroadcastCols(..) => "broadcast_cols",
            Op::Expand(..) => "expand",
            Op::SumRows(..) => "sum_rows",
            Op::SumCols(..) => "sum_cols",
            Op::SumAll(..) => "sum_all",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Exp(..) => "exp",
            Op::Sign(..) => "sign",
            Op::Step(..) => "step",
            Op::LogSumExpRows(..) => "log_sum_exp_rows",
            Op::GatherCols(..) => "gather_cols",
            Op::ScatterCols(..) => "scatter_cols",
            Op::SelectRows(..) => "select_rows",
            Op::ScatterAddRows(..) => "scatter_add_rows",
            Op::StackRows(..) => "stack_rows",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf | Op::Constant => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Transpose(a)
            | Op::BroadcastRows(a, _)
            | Op::BroadcastCols(a, _)
            | Op::Expand(a, _, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Sign(a)
            | Op::Step(a)
            | Op::LogSumExpRows(a)
            | Op::GatherCols(a, _)
            | Op::ScatterCols(a, _, _)
            | Op::SelectRows(a, _)
            | Op::ScatterAddRows(a, _, _) => vec![*a],
            Op::StackRows(parts) => parts.to_vec(),
        }
    }

    /// Operations whose output carries no gradient back to their inputs.
    fn blocks_gradient(&self) -> bool {
        matches!(self, Op::Leaf | Op::Constant | Op::Sign(_) | Op::Step(_))
    }
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Recording of a computation. Single writer; create one per thread.
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: NodeId,
}

impl<T> std::fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({})", self.id)
    }
}

/// Gradient values for every leaf that an output depends on.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    entries: Vec<(NodeId, Tensor<T>)>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient for `var`; `None` when `var` is not a leaf of the tape.
    pub fn get(&self, var: Var<'_, T>) -> Option<&Tensor<T>> {
        self.entries.iter().find(|(id, _)| *id == var.id).map(|(_, g)| g)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(node: NodeId, op: &'static str, detail: String) -> Error {
    Error::Shape { node, op, detail }
}

fn eval<T: Scalar>(nodes: &[Node<T>], id: NodeId, op: &Op<T>) -> Result<Tensor<T>> {
    let v = |i: NodeId| &nodes[i].value;
    let same = |a: NodeId, b: NodeId| -> Result<()> {
        if v(a).shape() == v(b).shape() {
            Ok(())
        } else {
            Err(shape_err(
                id,
                op.name(),
                format!("node {a} is {:?} but node {b} is {:?}", v(a).shape(), v(b).shape()),
            ))
        }
    };
    let out = match op {
        Op::Leaf | Op::Constant => unreachable!("leaves are not evaluated"),
        Op::Add(a, b) => {
            same(*a, *b)?;
            v(*a).add(v(*b))
        }
        Op::Sub(a, b) => {
            same(*a, *b)?;
            v(*a).sub(v(*b))
        }
        Op::Mul(a, b) => {
            same(*a, *b)?;
            v(*a).zip_map(v(*b), |x, y| x * y)
        }
        Op::Scale(a, k) => v(*a).scale(*k),
        Op::AddScalar(a, k) => v(*a).map(|x| x + *k),
        Op::MatMul(a, b) => v(*a).matmul(v(*b)).map_err(|_| {
            shape_err(
                id,
                op.name(),
                format!("node {a} is {:?} but node {b} is {:?}", v(*a).shape(), v(*b).shape()),
            )
        })?,
        Op::Transpose(a) => v(*a).transpose(),
        Op::BroadcastRows(a, n) => {
            let t = v(*a);
            if t.rows() != 1 {
                return Err(shape_err(id, op.name(), format!("node {a} is {:?}, expected one row", t.shape())));
            }
            Tensor::from_fn(*n, t.cols(), |_, j| t.get(0, j))
        }
        Op::BroadcastCols(a, c) => {
            let t = v(*a);
            if t.cols() != 1 {
                return Err(shape_err(id, op.name(), format!("node {a} is {:?}, expected one column", t.shape())));
            }
            Tensor::from_fn(t.rows(), *c, |i, _| t.get(i, 0))
        }
        Op::Expand(a, r, c) => {
            let t = v(*a);
            if t.shape() != [1, 1] {
                return Err(shape_err(id, op.name(), format!("node {a} is {:?}, expected 1x1", t.shape())));
            }
            Tensor::full(*r, *c, t.item())
        }
        Op::SumRows(a) => {
            let t = v(*a);
            let mut out = Tensor::zeros(1, t.cols());
            for i in 0..t.rows() {
                for (o, &x) in out.data_mut().iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            out
        }
        Op::SumCols(a) => {
            let t = v(*a);
            Tensor::from_fn(t.rows(), 1, |i, _| t.row(i).iter().copied().sum())
        }
        Op::SumAll(a) => Tensor::scalar(v(*a).sum()),
        Op::Tanh(a) => v(*a).map(|x| x.tanh()),
        Op::Relu(a) => v(*a).map(|x| if x > T::zero() { x } else { T::zero() }),
        Op::Exp(a) => v(*a).map(|x| x.exp()),
        Op::Sign(a) => v(*a).map(Scalar::sign0),
        Op::Step(a) => v(*a).map(|x| if x > T::zero() { T::one() } else { T::zero() }),
        Op::LogSumExpRows(a) => {
            let t = v(*a);
            if t.cols() == 0 {
                return Err(shape_err(id, op.name(), format!("node {a} has no columns")));
            }
            Tensor::from_fn(t.rows(), 1, |i, _| log_sum_exp(t.row(i)))
        }
        Op::GatherCols(a, idx) => {
            let t = v(*a);
            if idx.len() != t.rows() || idx.iter().any(|&k| k >= t.cols()) {
                return Err(shape_err(
                    id,
                    op.name(),
                    format!("{} indices for node {a} of shape {:?}", idx.len(), t.shape()),
                ));
            }
            Tensor::from_fn(t.rows(), 1, |i, _| t.get(i, idx[i]))
        }
        Op::ScatterCols(a, idx, cols) => {
            let t = v(*a);
            if t.cols() != 1 || idx.len() != t.rows() || idx.iter().any(|&k| k >= *cols) {
                return Err(shape_err(
                    id,
                    op.name(),
                    format!("{} indices for node {a} of shape {:?}", idx.len(), t.shape()),
                ));
            }
            let mut out = Tensor::zeros(t.rows(), *cols);
            for (i, &k) in idx.iter().enumerate() {
                out.set(i, k, t.get(i, 0));
            }
            out
        }
        Op::SelectRows(a, idx) => {
            let t = v(*a);
            if idx.iter().any(|&k| k >= t.rows()) {
                return Err(shape_err(id, op.name(), format!("row index out of range for node {a} of shape {:?}", t.shape())));
            }
            t.select_rows(idx)
        }
        Op::ScatterAddRows(a, idx, rows) => {
            let t = v(*a);
            if idx.len() != t.rows() || idx.iter().any(|&k| k >= *rows) {
                return Err(shape_err(
                    id,
                    op.name(),
                    format!("{} indices for node {a} of shape {:?}", idx.len(), t.shape()),
                ));
            }
            let mut out = Tensor::zeros(*rows, t.cols());
            for (i, &k) in idx.iter().enumerate() {
                for (o, &x) in out.row_mut(k).iter_mut().zip(t.row(i)) {
                    *o += x;
                }
            }
            out
        }
        Op::StackRows(parts) => {
            let cols = parts.first().map_or(0, |&p| v(p).cols());
            let mut data = Vec::new();
            let mut rows = 0;
            for &p in parts.iter() {
                if v(p).cols() != cols {
                    return Err(shape_err(id, op.name(), format!("node {p} has {} columns, expected {cols}", v(p).cols())));
                }
                rows += v(p).rows();
                data.extend_from_slice(v(p).data());
            }
            Tensor::from_vec(rows, cols, data)?
        }
    };
    Ok(out)
}

/// Stable log-sum-exp of one row: `max + ln Σ exp(x - max)`.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    m + row.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push_raw(&self, op: Op<T>, value: Tensor<T>) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op, value });
        Var { tape: self, id: nodes.len() - 1 }
    }

    fn push(&self, op: Op<T>) -> Result<Var<'_, T>> {
        let value = {
            let nodes = self.nodes.borrow();
            eval(&nodes, nodes.len(), &op)?
        };
        Ok(self.push_raw(op, value))
    }

    /// A differentiable input (parameter or data).
    pub fn leaf(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(Op::Leaf, value)
    }

    /// A value that gradients never flow into.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        self.push_raw(Op::Constant, value)
    }

    pub fn value(&self, var: Var<'_, T>) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[var.id].value)
    }

    /// Overwrites the value of a leaf. Call [`Tape::replay`] afterwards to
    /// refresh everything downstream.
    pub fn set_leaf(&self, var: Var<'_, T>, value: Tensor<T>) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        let node = nodes
            .get_mut(var.id)
            .ok_or_else(|| Error::Tape(format!("node {} does not exist", var.id)))?;
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Tape(format!("node {} is not a leaf", var.id)));
        }
        if node.value.shape() != value.shape() {
            return Err(shape_err(var.id, "set_leaf", format!("{:?} replaced by {:?}", node.value.shape(), value.shape())));
        }
        node.value = value;
        Ok(())
    }

    /// Re-evaluates every recorded operation in order from the current leaf
    /// and constant values.
    pub fn replay(&self) -> Result<()> {
        let mut nodes = self.nodes.borrow_mut();
        for id in 0..nodes.len() {
            if matches!(nodes[id].op, Op::Leaf | Op::Constant) {
                continue;
            }
            let op = nodes[id].op.clone();
            let value = eval(&nodes, id, &op)?;
            nodes[id].value = value;
        }
        Ok(())
    }

    fn op(&self, id: NodeId) -> Op<T> {
        self.nodes.borrow()[id].op.clone()
    }

    fn shape_of(&self, id: NodeId) -> [usize; 2] {
        self.nodes.borrow()[id].value.shape()
    }

    fn var(&self, id: NodeId) -> Var<'_, T> {
        Var { tape: self, id }
    }

    /// Gradients of `output` with respect to each of `wrt`, recorded on this
    /// tape so they can be differentiated again.
    ///
    /// `seed` is the adjoint of `output`; it defaults to ones, which gives the
    /// ordinary gradient for a scalar output. Inputs that `output` does not
    /// depend on get a zero gradient.
    pub fn grad<'t>(&'t self, output: Var<'t, T>, wrt: &[Var<'t, T>], seed: Option<Var<'t, T>>) -> Result<Vec<Var<'t, T>>> {
        let len = self.len();
        if output.id >= len || wrt.iter().any(|w| w.id >= len) {
            return Err(Error::Tape("gradient requested for a node not on this tape".into()));
        }
        let out_shape = self.shape_of(output.id);
        let seed = match seed {
            Some(s) => {
                if self.shape_of(s.id) != out_shape {
                    return Err(shape_err(
                        output.id,
                        "grad",
                        format!("seed is {:?} but output is {:?}", self.shape_of(s.id), out_shape),
                    ));
                }
                s
            }
            None => self.constant(Tensor::ones(out_shape[0], out_shape[1])),
        };

        let end = output.id + 1;
        let mut depends = vec![false; end];
        for w in wrt {
            if w.id < end {
                depends[w.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..end {
                if depends[id] || nodes[id].op.blocks_gradient() {
                    continue;
                }
                depends[id] = nodes[id].op.inputs().iter().any(|&i| depends[i]);
            }
        }

        let mut adjoint: Vec<Option<Var<'t, T>>> = vec![None; end];
        adjoint[output.id] = Some(seed);
        for id in (0..end).rev() {
            if !depends[id] {
                continue;
            }
            let Some(g) = adjoint[id] else { continue };
            let op = self.op(id);
            if op.blocks_gradient() {
                continue;
            }
            for (input, contribution) in self.vjp(id, &op, g, &depends)? {
                adjoint[input] = Some(match adjoint[input] {
                    None => contribution,
                    Some(prev) => prev.add(contribution)?,
                });
            }
        }

        wrt.iter()
            .map(|w| match adjoint.get(w.id).copied().flatten() {
                Some(g) => Ok(g),
                None => {
                    let [r, c] = self.shape_of(w.id);
                    Ok(self.constant(Tensor::zeros(r, c)))
                }
            })
            .collect()
    }

    /// Vector-Jacobian products of node `id` for each input that needs one.
    fn vjp<'t>(&'t self, id: NodeId, op: &Op<T>, g: Var<'t, T>, needs: &[bool]) -> Result<Vec<(NodeId, Var<'t, T>)>> {
        let need = |i: NodeId| needs[i];
        let this = self.var(id);
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf | Op::Constant | Op::Sign(_) | Op::Step(_) => {}
            Op::Add(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(*a) {
                    out.push((*a, g));
                }
                if need(*b) {
                    out.push((*b, g.scale(-T::one())?));
                }
            }
            Op::Mul(a, b) => {
                if need(*a) {
                    out.push((*a, g.mul(self.var(*b))?));
                }
                if need(*b) {
                    out.push((*b, g.mul(self.var(*a))?));
                }
            }
            Op::Scale(a, k) => out.push((*a, g.scale(*k)?)),
            Op::AddScalar(a, _) => out.push((*a, g)),
            Op::MatMul(a, b) => {
                if need(*a) {
                    out.push((*a, g.matmul(self.var(*b).t()?)?));
                }
                if need(*b) {
                    out.push((*b, self.var(*a).t()?.matmul(g)?));
                }
            }
            Op::Transpose(a) => out.push((*a, g.t()?)),
            Op::BroadcastRows(a, _) => out.push((*a, g.sum_rows()?)),
            Op::BroadcastCols(a, _) => out.push((*a, g.sum_cols()?)),
            Op::Expand(a, _, _) => out.push((*a, g.sum()?)),
            Op::SumRows(a) => {
                let [r, _] = self.shape_of(*a);
                out.push((*a, g.broadcast_rows(r)?));
            }
            Op::SumCols(a) => {
                let [_, c] = self.shape_of(*a);
                out.push((*a, g.broadcast_cols(c)?));
            }
            Op::SumAll(a) => {
                let [r, c] = self.shape_of(*a);
                out.push((*a, g.expand(r, c)?));
            }
            Op::Tanh(a) => {
                // d tanh = 1 - tanh²
                let d = this.mul(this)?.scale(-T::one())?.add_scalar(T::one())?;
                out.push((*a, g.mul(d)?));
            }
            Op::Relu(a) => {
                let mask = self.var(*a).step()?;
                out.push((*a, g.mul(mask)?));
            }
            Op::Exp(a) => out.push((*a, g.mul(this)?)),
            Op::LogSumExpRows(a) => {
                let x = self.var(*a);
                let c = self.shape_of(*a)[1];
                let softmax = x.sub(this.broadcast_cols(c)?)?.exp()?;
                out.push((*a, g.broadcast_cols(c)?.mul(softmax)?));
            }
            Op::GatherCols(a, idx) => {
                let c = self.shape_of(*a)[1];
                out.push((*a, g.scatter_cols(idx.clone(), c)?));
            }
            Op::ScatterCols(a, idx, _) => out.push((*a, g.gather_cols_arc(idx.clone())?)),
            Op::SelectRows(a, idx) => {
                let r = self.shape_of(*a)[0];
                out.push((*a, g.scatter_add_rows(idx.clone(), r)?));
            }
            Op::ScatterAddRows(a, idx, _) => out.push((*a, g.select_rows_arc(idx.clone())?)),
            Op::StackRows(parts) => {
                let mut start = 0;
                for &p in parts.iter() {
                    let rows = self.shape_of(p)[0];
                    if need(p) {
                        let idx: Arc<[usize]> = (start..start + rows).collect();
                        out.push((p, g.select_rows_arc(idx)?));
                    }
                    start += rows;
                }
            }
        }
        Ok(out)
    }

    /// Gradients of `output` (seeded with ones, or `seed`) for every leaf it
    /// depends on.
    pub fn backward(&self, output: Var<'_, T>, seed: Option<Tensor<T>>) -> Result<Gradients<T>> {
        let leaves: Vec<Var<'_, T>> = {
            let nodes = self.nodes.borrow();
            (0..=output.id.min(nodes.len().saturating_sub(1)))
                .filter(|&i| matches!(nodes[i].op, Op::Leaf))
                .map(|i| self.var(i))
                .collect()
        };
        let seed = seed.map(|s| self.constant(s));
        let grads = self.grad(output, &leaves, seed)?;
        Ok(Gradients {
            entries: leaves.iter().zip(grads).map(|(l, g)| (l.id, g.value())).collect(),
        })
    }

    /// Differentiates a scalar function of earlier gradient nodes with respect
    /// to upstream parameters. The gradient nodes must come from
    /// [`Tape::grad`] on this tape.
    pub fn backward_of_backward<'t>(&'t self, outer: Var<'t, T>, wrt: &[Var<'t, T>], outer_seed: Option<Var<'t, T>>) -> Result<Vec<Var<'t, T>>> {
        self.grad(outer, wrt, outer_seed)
    }
}

#[allow(clippy::should_implement_trait)]
impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(self) -> NodeId {
        self.id
    }

    pub fn tape(self) -> &'t Tape<T> {
        self.tape
    }

    pub fn value(self) -> Tensor<T> {
        self.tape.value(self).clone()
    }

    pub fn shape(self) -> [usize; 2] {
        self.tape.shape_of(self.id)
    }

    /// Value of a `1×1` node.
    pub fn item(self) -> T {
        self.tape.value(self).item()
    }

    fn unary(self, op: Op<T>) -> Result<Self> {
        self.tape.push(op)
    }

    fn binary(self, other: Self, op: Op<T>) -> Result<Self> {
        if !std::ptr::eq(self.tape, other.tape) {
            return Err(Error::Tape("operands recorded on different tapes".into()));
        }
        self.tape.push(op)
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Sub(self.id, other.id))
    }

    /// Elementwise product.
    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Mul(self.id, other.id))
    }

    pub fn matmul(self, other: Self) -> Result<Self> {
        self.binary(other, Op::MatMul(self.id, other.id))
    }

    pub fn scale(self, k: T) -> Result<Self> {
        self.unary(Op::Scale(self.id, k))
    }

    pub fn neg(self) -> Result<Self> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, k: T) -> Result<Self> {
        self.unary(Op::AddScalar(self.id, k))
    }

    pub fn t(self) -> Result<Self> {
        self.unary(Op::Transpose(self.id))
    }

    pub fn broadcast_rows(self, n: usize) -> Result<Self> {
        self.unary(Op::BroadcastRows(self.id, n))
    }

    pub fn broadcast_cols(self, c: usize) -> Result<Self> {
        self.unary(Op::BroadcastCols(self.id, c))
    }

    pub fn expand(self, r: usize, c: usize) -> Result<Self> {
        self.unary(Op::Expand(self.id, r, c))
    }

    pub fn sum_rows(self) -> Result<Self> {
        self.unary(Op::SumRows(self.id))
    }

    pub fn sum_cols(self) -> Result<Self> {
        self.unary(Op::SumCols(self.id))
    }

    pub fn sum(self) -> Result<Self> {
        self.unary(Op::SumAll(self.id))
    }

    pub fn mean(self) -> Result<Self> {
        let [r, c] = self.shape();
        self.sum()?.scale(T::one() / T::from_usize_lossy((r * c).max(1)))
    }

    pub fn tanh(self) -> Result<Self> {
        self.unary(Op::Tanh(self.id))
    }

    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu(self.id))
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Op::Exp(self.id))
    }

    pub fn sign(self) -> Result<Self> {
        self.unary(Op::Sign(self.id))
    }

    pub fn step(self) -> Result<Self> {
        self.unary(Op::Step(self.id))
    }

    pub fn log_sum_exp_rows(self) -> Result<Self> {
        self.unary(Op::LogSumExpRows(self.id))
    }

    pub fn gather_cols(self, idx: &[usize]) -> Result<Self> {
        self.gather_cols_arc(idx.into())
    }

    fn gather_cols_arc(self, idx: Arc<[usize]>) -> Result<Self> {
        self.unary(Op::GatherCols(self.id, idx))
    }

    fn scatter_cols(self, idx: Arc<[usize]>, cols: usize) -> Result<Self> {
        self.unary(Op::ScatterCols(self.id, idx, cols))
    }

    pub fn select_rows(self, idx: &[usize]) -> Result<Self> {
        self.select_rows_arc(idx.into())
    }

    fn select_rows_arc(self, idx: Arc<[usize]>) -> Result<Self> {
        self.unary(Op::SelectRows(self.id, idx))
    }

    pub fn scatter_add_rows(self, idx: Arc<[usize]>, rows: usize) -> Result<Self> {
        self.unary(Op::ScatterAddRows(self.id, idx, rows))
    }

    /// Adds a `1×c` row to every row of `self`.
    pub fn add_row(self, row: Self) -> Result<Self> {
        let n = self.shape()[0];
        self.add(row.broadcast_rows(n)?)
    }

    /// Multiplies every column of `self` elementwise by an `n×1` column.
    pub fn mul_col(self, col: Self) -> Result<Self> {
        let c = self.shape()[1];
        self.mul(col.broadcast_cols(c)?)
    }

    /// Mean softmax cross-entropy of row logits against integer labels,
    /// computed through log-sum-exp.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Self> {
        self.softmax_cross_entropy_per_sample(labels)?.mean()
    }

    /// Per-sample cross-entropy, `n×1`.
    pub fn softmax_cross_entropy_per_sample(self, labels: &[usize]) -> Result<Self> {
        let lse = self.log_sum_exp_rows()?;
        let target = self.gather_cols(labels)?;
        lse.sub(target)
    }
}

/// Stacks nodes vertically.
pub fn stack_rows<'t, T: Scalar>(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
    let first = parts.first().ok_or_else(|| Error::invalid("stack_rows of nothing"))?;
    let tape = first.tape;
    if parts.iter().any(|p| !std::ptr::eq(p.tape, tape)) {
        return Err(Error::Tape("operands recorded on different tapes".into()));
    }
    tape.push(Op::StackRows(parts.iter().map(|p| p.id).collect()))
}
