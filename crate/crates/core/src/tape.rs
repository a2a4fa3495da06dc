//! Wengert tape for reverse-mode differentiation of the continuous path.
//!
//! Every op evaluates eagerly and records just enough to replay the chain
//! rule. Discrete decisions (thresholds, top-k, density flags) never enter
//! the tape: they arrive as constant tensors.

use std::sync::Arc;

use crate::cost::{CostMeter, Module};
use crate::error::{DapeError, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    Scale(Var, S),
    Transpose(Var),
    RowSoftmax(Var),
    Relu(Var),
    AddRowBroadcast(Var, Var),
    MeanRows(Var),
    SumAll(Var),
    L2NormalizeRows(Var, Vec<S>),
    GatherRows(Var, Vec<usize>),
    PoolRows(Var, Vec<Vec<usize>>),
    ConcatRows(Vec<Var>),
    GatherCols(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    DivScalar(Var, Var),
    CrossEntropy(Var, Vec<usize>, Tensor<S>),
    Conv2d { x: Var, w: Var, k: usize },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Arc<Tensor<S>>,
    op: Op<S>,
    grad: bool,
}

/// Ordered record of primitive ops plus the cost meter they charge.
#[derive(Clone, Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    scope: Module,
    meter: CostMeter,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), scope: Module::Head, meter: CostMeter::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Switch the cost bucket; returns the previous one so callers can restore it.
    pub fn enter(&mut self, scope: Module) -> Module {
        std::mem::replace(&mut self.scope, scope)
    }

    pub fn scope(&self) -> Module {
        self.scope
    }

    pub fn meter(&self) -> &CostMeter {
        &self.meter
    }

    /// Charge work done outside the tape (e.g. cosine affinities) to the current scope.
    pub fn charge_cosines(&mut self, n: u64, d: usize) {
        self.meter.charge_cosines(self.scope, n, d);
    }

    pub fn charge_macs(&mut self, macs: u64) {
        self.meter.charge_macs(self.scope, macs);
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, grad: bool) -> Result<Var> {
        if !value.all_finite() {
            return Err(DapeError::Numeric(format!("non-finite output from {}", op_name(&op))));
        }
        self.nodes.push(Node { value: Arc::new(value), op, grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.param_shared(Arc::new(value))
    }

    /// Trainable leaf backed by storage shared with the caller.
    pub fn param_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: true });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.constant_shared(Arc::new(value))
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<S>>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, grad: false });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
        let n = self.shape(b)[1];
        self.meter.charge_macs(self.scope, (m * k * n) as u64);
        let g = self.needs(&[a, b]);
        self.push(out, Op::MatMul(a, b), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let g = self.needs(&[a, b]);
        self.push(out, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).sub(self.value(b))?;
        let g = self.needs(&[a, b]);
        self.push(out, Op::Sub(a, b), g)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.meter.charge_macs(self.scope, out.len() as u64);
        let g = self.needs(&[a, b]);
        self.push(out, Op::Hadamard(a, b), g)
    }

    pub fn scale(&mut self, a: Var, k: S) -> Result<Var> {
        let out = self.value(a).scale(k);
        let g = self.needs(&[a]);
        self.push(out, Op::Scale(a, k), g)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        let g = self.needs(&[a]);
        self.push(out, Op::Transpose(a), g)
    }

    pub fn row_softmax(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).row_softmax()?;
        let g = self.needs(&[a]);
        self.push(out, Op::RowSoftmax(a), g)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(S::zero()));
        let g = self.needs(&[a]);
        self.push(out, Op::Relu(a), g)
    }

    /// `a` (m×n) plus the row vector `b` (1×n) added to every row.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).require_matrix("add_row")?;
        if self.value(b).len() != n {
            return Err(DapeError::shapes("add_row", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b).data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..m {
            for (o, &x) in out.row_mut(i).iter_mut().zip(&bv) {
                *o += x;
            }
        }
        let g = self.needs(&[a, b]);
        self.push(out, Op::AddRowBroadcast(a, b), g)
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).mean_rows()?;
        let g = self.needs(&[a]);
        self.push(out, Op::MeanRows(a), g)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        let g = self.needs(&[a]);
        self.push(out, Op::SumAll(a), g)
    }

    /// Divide each row by its L2 norm; an all-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let (m, _) = self.value(a).require_matrix("l2_normalize_rows")?;
        let mut out = self.value(a).clone();
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = out.row_mut(i);
            let nrm = row.iter().map(|&x| x * x).sum::<S>().sqrt();
            if nrm > S::zero() {
                for x in row.iter_mut() {
                    *x /= nrm;
                }
            }
            norms.push(nrm);
        }
        let g = self.needs(&[a]);
        self.push(out, Op::L2NormalizeRows(a, norms), g)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = self.value(a).gather_rows(idx)?;
        let g = self.needs(&[a]);
        self.push(out, Op::GatherRows(a, idx.to_vec()), g)
    }

    /// Row `g` of the output is the mean of rows `groups[g]` of `a`.
    pub fn pool_rows(&mut self, a: Var, groups: &[Vec<usize>]) -> Result<Var> {
        let (m, n) = self.value(a).require_matrix("pool_rows")?;
        let mut out = Tensor::zeros(&[groups.len(), n]);
        let mut work = 0u64;
        for (g, members) in groups.iter().enumerate() {
            if members.is_empty() {
                return Err(DapeError::dim("pool_rows", format!("group {g} is empty")));
            }
            let src = self.value(a);
            let row = out.row_mut(g);
            for &r in members {
                if r >= m {
                    return Err(DapeError::Index(format!("row {r} out of range for {m} rows")));
                }
                for (o, &x) in row.iter_mut().zip(src.row(r)) {
                    *o += x;
                }
            }
            let inv = S::one() / S::from_usize_lossy(members.len());
            for o in row.iter_mut() {
                *o *= inv;
            }
            work += (members.len() * n) as u64;
        }
        self.meter.charge_macs(self.scope, work);
        let g = self.needs(&[a]);
        self.push(out, Op::PoolRows(a, groups.to_vec()), g)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<S>> = parts.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let g = self.needs(parts);
        self.push(out, Op::ConcatRows(parts.to_vec()), g)
    }

    pub fn gather_cols(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).require_matrix("gather_cols")?;
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(DapeError::Index(format!("column {bad} out of range for {c} columns")));
        }
        let src = self.value(a);
        let out = Tensor::from_fn(&[r, idx.len()], |p| src.get2(p / idx.len(), idx[p % idx.len()]));
        let g = self.needs(&[a]);
        self.push(out, Op::GatherCols(a, idx.to_vec()), g)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).require_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.value(p).require_matrix("concat_cols")?;
            if pr != r {
                return Err(DapeError::shapes("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(&[r, total], data)?;
        let g = self.needs(parts);
        self.push(out, Op::ConcatCols(parts.to_vec()), g)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let g = self.needs(&[a]);
        self.push(out, Op::Reshape(a), g)
    }

    /// `a / s` with `s` a one-element tensor.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(DapeError::dim("div_scalar", format!("divisor has shape {:?}", self.shape(s))));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|x| x / k);
        let g = self.needs(&[a, s]);
        self.push(out, Op::DivScalar(a, s), g)
    }

    /// Mean over rows of `−log softmax(row)[target]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != m || targets.iter().any(|&t| t >= n) {
            return Err(DapeError::dim("cross_entropy", format!("{} targets for {m}×{n} logits", targets.len())));
        }
        let probs = self.value(logits).row_softmax()?;
        let mut loss = S::zero();
        for (i, &t) in targets.iter().enumerate() {
            let row = self.value(logits).row(i);
            let max = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<S>().ln();
            loss += lse - row[t];
        }
        let out = Tensor::scalar(loss / S::from_usize_lossy(m));
        let g = self.needs(&[logits]);
        self.push(out, Op::CrossEntropy(logits, targets.to_vec(), probs), g)
    }

    /// Depthwise convolution, see [`crate::tensor::conv2d_local`].
    pub fn conv2d(&mut self, x: Var, w: Var, k: usize) -> Result<Var> {
        let out = crate::tensor::conv2d_local(self.value(x), k, self.value(w))?;
        let (h, ww, c) = (out.shape()[0], out.shape()[1], out.shape()[2]);
        self.meter.charge_macs(self.scope, (h * ww * c * k * k) as u64);
        let g = self.needs(&[x, w]);
        self.push(out, Op::Conv2d { x, w, k }, g)
    }

    /// Reverse pass from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(DapeError::dim("backward", format!("loss has shape {:?}", self.shape(loss))));
        }
        self.backward_seeded(loss, Tensor::ones(self.shape(loss)))
    }

    /// Reverse pass from `out` given the upstream gradient `seed` of the same shape.
    pub fn backward_seeded(&self, out: Var, seed: Tensor<S>) -> Result<Gradients<S>> {
        if seed.shape() != self.shape(out) {
            return Err(DapeError::shapes("backward", seed.shape(), self.shape(out)));
        }
        let loss = out;
        let mut grads: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(seed);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if !g.all_finite() {
                    return Err(DapeError::Numeric(format!("non-finite gradient at node {i}")));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<S>, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        let val = |v: Var| &*self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor<S>| -> Result<()> {
            if !self.nodes[v.0].grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                acc(*a, g.matmul(&val(*b).transpose()?)?)?;
                acc(*b, val(*a).transpose()?.matmul(g)?)?;
            }
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-S::one()))?;
            }
            Op::Hadamard(a, b) => {
                acc(*a, g.hadamard(val(*b))?)?;
                acc(*b, g.hadamard(val(*a))?)?;
            }
            Op::Scale(a, k) => acc(*a, g.scale(*k))?,
            Op::Transpose(a) => acc(*a, g.transpose()?)?,
            Op::RowSoftmax(a) => {
                let y = &*node.value;
                let (m, n) = (y.rows(), y.cols());
                let mut dx = Tensor::zeros(&[m, n]);
                for i in 0..m {
                    let dot: S = y.row(i).iter().zip(g.row(i)).map(|(&p, &q)| p * q).sum();
                    for j in 0..n {
                        dx.set2(i, j, y.get2(i, j) * (g.get2(i, j) - dot));
                    }
                }
                acc(*a, dx)?;
            }
            Op::Relu(a) => {
                let mask = val(*a).map(|x| if x > S::zero() { S::one() } else { S::zero() });
                acc(*a, g.hadamard(&mask)?)?;
            }
            Op::AddRowBroadcast(a, b) => {
                acc(*a, g.clone())?;
                let colsum = g.mean_rows()?.scale(S::from_usize_lossy(g.rows()));
                acc(*b, colsum.reshape(val(*b).shape())?)?;
            }
            Op::MeanRows(a) => {
                let m = val(*a).rows();
                let inv = S::one() / S::from_usize_lossy(m);
                let n = g.len();
                acc(*a, Tensor::from_fn(val(*a).shape(), |i| g.data()[i % n] * inv))?;
            }
            Op::SumAll(a) => acc(*a, Tensor::full(val(*a).shape(), g.data()[0]))?,
            Op::L2NormalizeRows(a, norms) => {
                let y = &*node.value;
                let mut dx = Tensor::zeros(y.shape());
                for (i, &nrm) in norms.iter().enumerate() {
                    if nrm == S::zero() {
                        continue;
                    }
                    let dot: S = y.row(i).iter().zip(g.row(i)).map(|(&p, &q)| p * q).sum();
                    for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                        *o = (g.get2(i, j) - y.get2(i, j) * dot) / nrm;
                    }
                }
                acc(*a, dx)?;
            }
            Op::GatherRows(a, idx) => {
                let mut dx = Tensor::zeros(val(*a).shape());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &x) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += x;
                    }
                }
                acc(*a, dx)?;
            }
            Op::PoolRows(a, groups) => {
                let mut dx = Tensor::zeros(val(*a).shape());
                for (gi, members) in groups.iter().enumerate() {
                    let inv = S::one() / S::from_usize_lossy(members.len());
                    for &r in members {
                        for (o, &x) in dx.row_mut(r).iter_mut().zip(g.row(gi)) {
                            *o += x * inv;
                        }
                    }
                }
                acc(*a, dx)?;
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let rows = val(p).rows();
                    let idx: Vec<usize> = (start..start + rows).collect();
                    acc(p, g.gather_rows(&idx)?)?;
                    start += rows;
                }
            }
            Op::GatherCols(a, idx) => {
                let mut dx = Tensor::zeros(val(*a).shape());
                for i in 0..g.rows() {
                    for (p, &j) in idx.iter().enumerate() {
                        let cur = dx.get2(i, j);
                        dx.set2(i, j, cur + g.get2(i, p));
                    }
                }
                acc(*a, dx)?;
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let (r, c) = (val(p).rows(), val(p).cols());
                    acc(p, Tensor::from_fn(&[r, c], |q| g.get2(q / c, start + q % c)))?;
                    start += c;
                }
            }
            Op::Reshape(a) => acc(*a, g.reshaped(val(*a).shape())?)?,
            Op::DivScalar(a, s) => {
                let k = val(*s).data()[0];
                acc(*a, g.map(|x| x / k))?;
                let num: S = g.data().iter().zip(val(*a).data()).map(|(&p, &q)| p * q).sum();
                acc(*s, Tensor::scalar(-num / (k * k)))?;
            }
            Op::CrossEntropy(logits, targets, probs) => {
                let m = probs.rows();
                let scale = g.data()[0] / S::from_usize_lossy(m);
                let mut dx = probs.clone();
                for (i, &t) in targets.iter().enumerate() {
                    let cur = dx.get2(i, t);
                    dx.set2(i, t, cur - S::one());
                }
                acc(*logits, dx.scale(scale))?;
            }
            Op::Conv2d { x, w, k } => {
                let xv = val(*x);
                let wv = val(*w);
                let (h, ww, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let k = *k;
                let r = (k / 2) as isize;
                let mut dx = vec![S::zero(); xv.len()];
                let mut dw = vec![S::zero(); wv.len()];
                for y in 0..h {
                    for xx in 0..ww {
                        let obase = (y * ww + xx) * c;
                        for dy in 0..k {
                            let sy = y as isize + dy as isize - r;
                            if sy < 0 || sy >= h as isize {
                                continue;
                            }
                            for ddx in 0..k {
                                let sx = xx as isize + ddx as isize - r;
                                if sx < 0 || sx >= ww as isize {
                                    continue;
                                }
                                let ibase = (sy as usize * ww + sx as usize) * c;
                                for ch in 0..c {
                                    let wi = (ch * k + dy) * k + ddx;
                                    let go = g.data()[obase + ch];
                                    dx[ibase + ch] += wv.data()[wi] * go;
                                    dw[wi] += xv.data()[ibase + ch] * go;
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::new(xv.shape(), dx)?)?;
                acc(*w, Tensor::new(wv.shape(), dw)?)?;
            }
        }
        Ok(())
    }
}

fn op_name<S>(op: &Op<S>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::RowSoftmax(..) => "row_softmax",
        Op::Relu(..) => "relu",
        Op::AddRowBroadcast(..) => "add_row",
        Op::MeanRows(..) => "mean_rows",
        Op::SumAll(..) => "sum_all",
        Op::L2NormalizeRows(..) => "l2_normalize_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::PoolRows(..) => "pool_rows",
        Op::ConcatRows(..) => "concat_rows",
        Op::GatherCols(..) => "gather_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Reshape(..) => "reshape",
        Op::DivScalar(..) => "div_scalar",
        Op::CrossEntropy(..) => "cross_entropy",
        Op::Conv2d { .. } => "conv2d",
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of a node; `None` when no path from the loss reaches it.
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<S>) -> Tensor<S> {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}
