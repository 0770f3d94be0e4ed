//! Reverse-mode automatic differentiation over an append-only arena.
//!
//! A [`Graph`] records every operation whose inputs require gradients. The
//! backward pass in [`Graph::grad`] is itself written in terms of graph
//! operations, so with `create_graph = true` the returned gradients are
//! ordinary differentiable nodes and can be differentiated again. This is what
//! lets an attacker differentiate through several unrolled inner-loop gradient
//! steps back to the training inputs.
//!
//! Shapes are explicit: binary elementwise ops require identical shapes and
//! broadcasting goes through [`Graph::expand`] / [`Graph::sum_to`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Differentiable operation kinds, used for diagnostics and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    Mul,
    Div,
    ScalarMul,
    Relu,
    Exp,
    LogSoftmax,
    Sum,
    Mean,
    SumTo,
    Expand,
    Reshape,
    Transpose,
    GatherRows,
    ScatterRows,
    Square,
    Sqrt,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Div,
        OpKind::ScalarMul,
        OpKind::Relu,
        OpKind::Exp,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::SumTo,
        OpKind::Expand,
        OpKind::Reshape,
        OpKind::Transpose,
        OpKind::GatherRows,
        OpKind::ScatterRows,
        OpKind::Square,
        OpKind::Sqrt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::ScalarMul => "scalar_mul",
            OpKind::Relu => "relu",
            OpKind::Exp => "exp",
            OpKind::LogSoftmax => "log_softmax",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumTo => "sum_to",
            OpKind::Expand => "expand",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::GatherRows => "gather_rows",
            OpKind::ScatterRows => "scatter_rows",
            OpKind::Square => "square",
            OpKind::Sqrt => "sqrt",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    ScalarMul(Var, f64),
    Relu(Var),
    Exp(Var),
    LogSoftmax(Var, usize),
    Sum(Var),
    Mean(Var),
    SumTo(Var),
    Expand(Var),
    Reshape(Var),
    Transpose(Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    Square(Var),
    Sqrt(Var),
}

impl Op {
    fn inputs(&self) -> ([Option<Var>; 2], Option<OpKind>) {
        use Op::*;
        match *self {
            Leaf => ([None, None], None),
            MatMul(a, b) => ([Some(a), Some(b)], Some(OpKind::MatMul)),
            Add(a, b) => ([Some(a), Some(b)], Some(OpKind::Add)),
            Sub(a, b) => ([Some(a), Some(b)], Some(OpKind::Sub)),
            Mul(a, b) => ([Some(a), Some(b)], Some(OpKind::Mul)),
            Div(a, b) => ([Some(a), Some(b)], Some(OpKind::Div)),
            ScalarMul(a, _) => ([Some(a), None], Some(OpKind::ScalarMul)),
            Relu(a) => ([Some(a), None], Some(OpKind::Relu)),
            Exp(a) => ([Some(a), None], Some(OpKind::Exp)),
            LogSoftmax(a, _) => ([Some(a), None], Some(OpKind::LogSoftmax)),
            Sum(a) => ([Some(a), None], Some(OpKind::Sum)),
            Mean(a) => ([Some(a), None], Some(OpKind::Mean)),
            SumTo(a) => ([Some(a), None], Some(OpKind::SumTo)),
            Expand(a) => ([Some(a), None], Some(OpKind::Expand)),
            Reshape(a) => ([Some(a), None], Some(OpKind::Reshape)),
            Transpose(a) => ([Some(a), None], Some(OpKind::Transpose)),
            GatherRows(a, _) => ([Some(a), None], Some(OpKind::GatherRows)),
            ScatterRows(a, _) => ([Some(a), None], Some(OpKind::ScatterRows)),
            Square(a) => ([Some(a), None], Some(OpKind::Square)),
            Sqrt(a) => ([Some(a), None], Some(OpKind::Sqrt)),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Per-computation arena of tensors and the operations that produced them.
///
/// Node ids are assigned in creation order, so the arena is always in
/// topological order. A graph is meant to live for one adaptation/attack
/// evaluation and then be dropped.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // false while a first-order backward pass runs: new nodes are constants.
    recording: bool,
    fault: Option<OpKind>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            recording: true,
            fault: None,
        }
    }

    /// Number of nodes currently held.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Scales every backward contribution of `kind` by 1.5. Test hook for
    /// checking that gradient checks catch a broken derivative.
    pub fn inject_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes.get(v.0).ok_or(Error::NotOnGraph(v.0))
    }

    /// Current value of `v`.
    ///
    /// # Panics
    /// If `v` belongs to a different (larger) graph.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let (inputs, kind) = op.inputs();
        if let Some(kind) = kind {
            value.ensure_finite(kind.name())?;
        }
        let requires_grad = self.recording
            && inputs
                .iter()
                .flatten()
                .any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.node(a)?.value.shape(), self.node(b)?.value.shape());
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(out, op)
    }

    fn map_unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let out = self.node(a)?.value.map(f);
        self.push(out, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ta.shape().to_vec(),
            rhs: tb.shape().to_vec(),
        };
        let ((m, k), (k2, n)) = (
            ta.dims2().map_err(|_| mismatch())?,
            tb.dims2().map_err(|_| mismatch())?,
        );
        if k != k2 {
            return Err(mismatch());
        }
        let out = Tensor::from_parts(vec![m, n], matmul_kernel(ta.data(), tb.data(), m, k, n));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        self.zip_with(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map_unary(a, Op::ScalarMul(a, s), |x| x * s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scalar_mul(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Relu(a), |x| if x > 0.0 { x } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Exp(a), libm::exp)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Square(a), |x| x * x)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.map_unary(a, Op::Sqrt(a), libm::sqrt)
    }

    /// Log-softmax along `axis` of a vector (axis 0) or matrix (axis 0 or 1).
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (outer, len, stride) = match (t.shape(), axis) {
            ([n], 0) => (1, *n, 1),
            ([r, c], 1) => (*r, *c, 1),
            ([r, c], 0) => (*c, *r, *c),
            _ => {
                return Err(Error::InvalidArgument(alloc::format!(
                    "log_softmax axis {axis} on shape {:?}",
                    t.shape()
                )))
            }
        };
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            // rows (axis 1) are contiguous; columns (axis 0) step by `stride`
            let base = if stride == 1 { o * len } else { o };
            let idx = |i: usize| base + i * stride;
            let max = (0..len).map(|i| src[idx(i)]).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log((0..len).map(|i| libm::exp(src[idx(i)] - max)).sum::<f64>());
            for i in 0..len {
                out[idx(i)] = src[idx(i)] - lse;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push(out, Op::LogSoftmax(a, axis))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.node(a)?.value.data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        if t.numel() == 0 {
            return Err(Error::EmptyBatch);
        }
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Broadcasts `a` to `shape`. `a` must be rank 0, or have the same rank
    /// with every dimension equal to the target or 1.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        check_broadcast("expand", t.shape(), shape)?;
        let mut out = vec![0.0; shape.iter().product()];
        let src = t.data();
        for_each_broadcast(t.shape(), shape, |dst, s| out[dst] = src[s]);
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::Expand(a))
    }

    /// Sums `a` down to `shape`, the adjoint of [`Graph::expand`].
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        check_broadcast("sum_to", shape, t.shape())?;
        let mut out = vec![0.0; shape.iter().product()];
        let src = t.data();
        for_each_broadcast(shape, t.shape(), |s, d| out[d] += src[s]);
        self.push(Tensor::from_parts(shape.to_vec(), out), Op::SumTo(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.node(a)?.value.clone().reshaped(shape.to_vec())?;
        self.push(t, Op::Reshape(a))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (r, c) = t.dims2()?;
        let src = t.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a))
    }

    /// Rows of a matrix at `indices` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (r, _) = t.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(Error::InvalidArgument(alloc::format!(
                "gather_rows index {bad} out of {r} rows"
            )));
        }
        let out = t.select_rows(indices);
        self.push(out, Op::GatherRows(a, indices.to_vec()))
    }

    /// Adds row `i` of `a` into row `indices[i]` of a zero `(rows, cols)`
    /// matrix, the adjoint of [`Graph::gather_rows`].
    pub fn scatter_rows(&mut self, a: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let t = &self.node(a)?.value;
        let (r, c) = t.dims2()?;
        if r != indices.len() || indices.iter().any(|&i| i >= rows) {
            return Err(Error::InvalidArgument(alloc::format!(
                "scatter_rows of {r} rows into {rows} with {} indices",
                indices.len()
            )));
        }
        let mut out = Tensor::zeros(&[rows, c]);
        for (i, &dst) in indices.iter().enumerate() {
            for (o, v) in out.row_mut(dst).iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterRows(a, indices.to_vec()))
    }

    /// Gradients of the scalar `output` with respect to each of `wrt`.
    ///
    /// With `create_graph = false` the returned nodes are detached constants
    /// and every intermediate node created by the backward pass is released.
    /// With `create_graph = true` the backward pass is recorded, so the
    /// returned gradients can be differentiated again.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        let out = self.node(output)?;
        if out.value.numel() != 1 {
            return Err(Error::NotScalar(out.value.shape().to_vec()));
        }
        let seed = Tensor::full(out.value.shape(), 1.0);
        self.backprop(output, seed, wrt, create_graph)
    }

    /// Vector-Jacobian products `cotangent · ∂output/∂wrt_i` for an output of
    /// any shape, as plain tensors.
    pub fn vjp_values(&mut self, output: Var, cotangent: &Tensor, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let out = self.node(output)?;
        if out.value.shape() != cotangent.shape() {
            return Err(Error::ShapeMismatch {
                op: "vjp",
                lhs: out.value.shape().to_vec(),
                rhs: cotangent.shape().to_vec(),
            });
        }
        let mark = self.nodes.len();
        let grads = self.backprop(output, cotangent.clone(), wrt, false)?;
        let values = grads.iter().map(|g| self.nodes[g.0].value.clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    fn backprop(&mut self, output: Var, seed: Tensor, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>> {
        for &w in wrt {
            if !self.node(w)?.requires_grad {
                return Err(Error::NotDifferentiable(w.0));
            }
        }
        let Some(lo) = wrt.iter().map(|w| w.0).min() else {
            return Ok(Vec::new());
        };
        if lo > output.0 {
            return Err(Error::Unreachable(lo));
        }
        let span = output.0 - lo + 1;

        // Forward: which nodes depend on some wrt. Backward: which of those
        // feed the output. Only nodes with both flags receive gradients.
        let mut live = vec![false; span];
        for &w in wrt {
            live[w.0 - lo] = true;
        }
        for id in lo..=output.0 {
            let node = &self.nodes[id];
            if !live[id - lo] && node.requires_grad {
                let (inputs, _) = node.op.inputs();
                live[id - lo] = inputs.iter().flatten().any(|v| v.0 >= lo && live[v.0 - lo]);
            }
        }
        let mut feeds = vec![false; span];
        feeds[span - 1] = live[span - 1];
        for id in (lo..=output.0).rev() {
            if feeds[id - lo] {
                let (inputs, _) = self.nodes[id].op.inputs();
                for v in inputs.iter().flatten() {
                    if v.0 >= lo && live[v.0 - lo] {
                        feeds[v.0 - lo] = true;
                    }
                }
            }
        }
        if let Some(w) = wrt.iter().find(|w| !feeds[w.0 - lo]) {
            return Err(Error::Unreachable(w.0));
        }
        for (l, f) in live.iter_mut().zip(&feeds) {
            *l &= *f;
        }

        let mark = self.nodes.len();
        let was_recording = self.recording;
        self.recording = create_graph;
        let result = self.backward(output, seed, lo, &live, wrt);
        self.recording = was_recording;
        let grads = result?;

        if create_graph {
            Ok(grads)
        } else {
            let values: Vec<Tensor> = grads.iter().map(|g| self.nodes[g.0].value.clone()).collect();
            self.nodes.truncate(mark);
            Ok(values.into_iter().map(|t| self.constant(t)).collect())
        }
    }

    /// Convenience wrapper returning plain gradient tensors.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let mark = self.nodes.len();
        let grads = self.grad(output, wrt, false)?;
        let values = grads.iter().map(|g| self.nodes[g.0].value.clone()).collect();
        self.nodes.truncate(mark);
        Ok(values)
    }

    fn backward(&mut self, output: Var, seed: Tensor, lo: usize, live: &[bool], wrt: &[Var]) -> Result<Vec<Var>> {
        let mut grads: Vec<Option<Var>> = vec![None; live.len()];
        grads[output.0 - lo] = Some(self.constant(seed));

        for id in (lo..=output.0).rev() {
            let Some(g) = grads[id - lo] else { continue };
            if !live[id - lo] {
                continue;
            }
            let need = |v: Var| v.0 >= lo && live[v.0 - lo];
            let contributions = self.vjp(Var(id), g, &need)?;
            for (input, mut gi) in contributions {
                if let (Some(kind), Some(fault)) = (self.nodes[id].op.inputs().1, self.fault) {
                    if kind == fault {
                        gi = self.scalar_mul(gi, 1.5)?;
                    }
                }
                let slot = &mut grads[input.0 - lo];
                *slot = Some(match *slot {
                    Some(prev) => self.add(prev, gi)?,
                    None => gi,
                });
            }
        }
        wrt.iter()
            .map(|w| grads[w.0 - lo].ok_or(Error::Unreachable(w.0)))
            .collect()
    }

    /// Vector-Jacobian products of node `y` for the inputs selected by `need`.
    fn vjp(&mut self, y: Var, g: Var, need: &dyn Fn(Var) -> bool) -> Result<Vec<(Var, Var)>> {
        let op = self.nodes[y.0].op.clone();
        let mut out = Vec::with_capacity(2);
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if need(a) {
                    let bt = self.transpose(b)?;
                    out.push((a, self.matmul(g, bt)?));
                }
                if need(b) {
                    let at = self.transpose(a)?;
                    out.push((b, self.matmul(at, g)?));
                }
            }
            Op::Add(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, g));
                }
            }
            Op::Sub(a, b) => {
                if need(a) {
                    out.push((a, g));
                }
                if need(b) {
                    out.push((b, self.neg(g)?));
                }
            }
            Op::Mul(a, b) => {
                if need(a) {
                    out.push((a, self.mul(g, b)?));
                }
                if need(b) {
                    out.push((b, self.mul(g, a)?));
                }
            }
            Op::Div(a, b) => {
                if need(a) {
                    out.push((a, self.div(g, b)?));
                }
                if need(b) {
                    // d(a/b)/db = -(a/b)/b
                    let gy = self.mul(g, y)?;
                    let q = self.div(gy, b)?;
                    out.push((b, self.neg(q)?));
                }
            }
            Op::ScalarMul(a, s) => out.push((a, self.scalar_mul(g, s)?)),
            Op::Relu(a) => {
                let mask = self.nodes[a.0].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 });
                let mask = self.constant(mask);
                out.push((a, self.mul(g, mask)?));
            }
            Op::Exp(a) => out.push((a, self.mul(g, y)?)),
            Op::LogSoftmax(a, axis) => {
                let shape = self.shape(a).to_vec();
                let mut keep = shape.clone();
                keep[axis] = 1;
                let gs = self.sum_to(g, &keep)?;
                let gs = self.expand(gs, &shape)?;
                let p = self.exp(y)?;
                let pg = self.mul(p, gs)?;
                out.push((a, self.sub(g, pg)?));
            }
            Op::Sum(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.expand(g, &shape)?));
            }
            Op::Mean(a) => {
                let shape = self.shape(a).to_vec();
                let n = self.nodes[a.0].value.numel() as f64;
                let e = self.expand(g, &shape)?;
                out.push((a, self.scalar_mul(e, 1.0 / n)?));
            }
            Op::SumTo(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.expand(g, &shape)?));
            }
            Op::Expand(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.sum_to(g, &shape)?));
            }
            Op::Reshape(a) => {
                let shape = self.shape(a).to_vec();
                out.push((a, self.reshape(g, &shape)?));
            }
            Op::Transpose(a) => out.push((a, self.transpose(g)?)),
            Op::GatherRows(a, idx) => {
                let rows = self.shape(a)[0];
                out.push((a, self.scatter_rows(g, &idx, rows)?));
            }
            Op::ScatterRows(a, idx) => out.push((a, self.gather_rows(g, &idx)?)),
            Op::Square(a) => {
                let two_a = self.scalar_mul(a, 2.0)?;
                out.push((a, self.mul(g, two_a)?));
            }
            Op::Sqrt(a) => {
                let two_y = self.scalar_mul(y, 2.0)?;
                out.push((a, self.div(g, two_y)?));
            }
        }
        Ok(out.into_iter().filter(|(v, _)| need(*v)).collect())
    }
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn check_broadcast(op: &'static str, small: &[usize], big: &[usize]) -> Result<()> {
    let ok = small.is_empty()
        || (small.len() == big.len() && small.iter().zip(big).all(|(&s, &b)| s == b || s == 1));
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: small.to_vec(),
            rhs: big.to_vec(),
        })
    }
}

/// Calls `f(big_index, small_index)` for every element of `big`, where the
/// small index is the broadcast source element.
fn for_each_broadcast(small: &[usize], big: &[usize], mut f: impl FnMut(usize, usize)) {
    let total: usize = big.iter().product();
    if small.is_empty() {
        (0..total).for_each(|i| f(i, 0));
        return;
    }
    let rank = big.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for d in (0..rank).rev() {
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for dst in 0..total {
        f(dst, src);
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += strides[d];
            if idx[d] < big[d] {
                break;
            }
            src -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(3));
        let a = g.constant(t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let p = g.matmul(i, a).unwrap();
        assert_eq!(g.value(p), g.value(a));
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let gx = g.grad(s, &[x], false).unwrap();
        assert_eq!(g.value(gx[0]).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[1], &[2.0]), true);
        let x2 = g.mul(x, x).unwrap();
        let x3 = g.mul(x2, x).unwrap();
        let f = g.sum(x3).unwrap();
        let d1 = g.grad(f, &[x], true).unwrap()[0];
        assert!((g.value(d1).data()[0] - 12.0).abs() < 1e-12);
        let s = g.sum(d1).unwrap();
        let d2 = g.grad(s, &[x], false).unwrap()[0];
        assert!((g.value(d2).data()[0] - 12.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::zeros(&[2, 3]), true);
        let b = g.leaf(Tensor::zeros(&[2, 3]), true);
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        let c = g.leaf(Tensor::zeros(&[3]), true);
        assert!(matches!(g.add(a, c), Err(Error::ShapeMismatch { .. })));
        // not scalar
        assert!(matches!(g.grad(a, &[a], false), Err(Error::NotScalar(_))));
        // unreachable wrt
        let s = g.sum(a).unwrap();
        assert!(matches!(g.grad(s, &[b], false), Err(Error::Unreachable(_))));
        // constant wrt
        let k = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.grad(s, &[k], false), Err(Error::NotDifferentiable(_))));
        // non-finite
        let neg = g.constant(t(&[1], &[-1.0]));
        assert!(matches!(g.sqrt(neg), Err(Error::NonFinite { op: "sqrt" })));
        // foreign handle
        let mut other = Graph::new();
        assert!(matches!(other.sum(s), Err(Error::NotOnGraph(_))));
    }

    #[test]
    fn first_order_backward_releases_intermediates() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 2], &[0.5, -1.0, 2.0, 0.1]), true);
        let y = g.matmul(x, x).unwrap();
        let y = g.relu(y).unwrap();
        let s = g.sum(y).unwrap();
        let before = g.len();
        g.grad(s, &[x], false).unwrap();
        assert_eq!(g.len(), before + 1);
    }

    #[test]
    fn constants_never_get_grad_nodes() {
        let mut g = Graph::new();
        let c = g.constant(t(&[2], &[1.0, 2.0]));
        let x = g.leaf(t(&[2], &[3.0, 4.0]), true);
        let cc = g.mul(c, c).unwrap();
        assert!(!g.requires_grad(cc));
        let p = g.mul(cc, x).unwrap();
        let s = g.sum(p).unwrap();
        let gx = g.grad(s, &[x], false).unwrap();
        assert_eq!(g.value(gx[0]).data(), &[1.0, 4.0]);
    }

    #[test]
    fn broadcast_round_trip() {
        let mut g = Graph::new();
        let b = g.leaf(t(&[1, 3], &[1.0, 2.0, 3.0]), true);
        let e = g.expand(b, &[2, 3]).unwrap();
        assert_eq!(g.value(e).data(), &[1., 2., 3., 1., 2., 3.]);
        let s = g.sum_to(e, &[1, 3]).unwrap();
        assert_eq!(g.value(s).data(), &[2., 4., 6.]);
        let c = g.leaf(t(&[2, 1], &[1.0, 2.0]), true);
        let e = g.expand(c, &[2, 2]).unwrap();
        assert_eq!(g.value(e).data(), &[1., 1., 2., 2.]);
        let sc = g.scalar(7.0);
        let e = g.expand(sc, &[2]).unwrap();
        assert_eq!(g.value(e).data(), &[7., 7.]);
    }

    #[test]
    fn log_softmax_columns() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]));
        let y = g.log_softmax(x, 0).unwrap();
        let half = libm::log(0.5);
        for v in g.value(y).data() {
            assert!((v - half).abs() < 1e-15);
        }
    }
}
