//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every primitive evaluates eagerly and appends a node holding its output
//! value and enough of its inputs to replay the adjoint. `backward` walks the
//! list in reverse, so node order is already a topological order.

use super::tensor::Tensor;
use crate::error::{ensure, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Mean,
}

/// Primitive identity, used for reporting and for adjoint fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    AddBias,
    Add,
    Sub,
    Mul,
    Scale,
    Offset,
    Relu,
    Sigmoid,
    Tanh,
    Abs,
    Square,
    Conv1d,
    Pool,
    Concat,
    Stack,
    Reshape,
    Slice,
    Sum,
    Mean,
    AdaptiveMeanPool,
    ExpandRows,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Abs(Var),
    Square(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        dilation: usize,
    },
    Pool {
        x: Var,
        axis: usize,
        mode: PoolMode,
        argmax: Vec<usize>,
    },
    Concat {
        a: Var,
        b: Var,
        axis: usize,
    },
    Stack {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    AdaptiveMeanPool {
        x: Var,
        out_len: usize,
    },
    ExpandRows(Var),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Offset(..) => OpKind::Offset,
            Op::Relu(..) => OpKind::Relu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::Conv1d { .. } => OpKind::Conv1d,
            Op::Pool { .. } => OpKind::Pool,
            Op::Concat { .. } => OpKind::Concat,
            Op::Stack { .. } => OpKind::Stack,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Slice { .. } => OpKind::Slice,
            Op::Sum(..) => OpKind::Sum,
            Op::Mean(..) => OpKind::Mean,
            Op::AdaptiveMeanPool { .. } => OpKind::AdaptiveMeanPool,
            Op::ExpandRows(..) => OpKind::ExpandRows,
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// dLoss/dVar, or `None` when `var` does not require a gradient.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<OpKind>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test hook: scales every adjoint contribution of `kind` by 1.5 so that
    /// gradient checks can be shown to catch a broken primitive.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn kind(&self, var: Var) -> OpKind {
        self.nodes[var.0].op.kind()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(x).map(f);
        let rg = self.any_grad(&[x]);
        self.push(value, op, rg)
    }

    fn binary_same_shape(&mut self, a: Var, b: Var, name: &str) -> Result<()> {
        ensure!(
            self.shape(a) == self.shape(b),
            "{name}: shape {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        Ok(())
    }

    fn matrix_dims(&self, var: Var, name: &str) -> Result<(usize, usize)> {
        match *self.shape(var) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::invalid(format!("{name}: expected a matrix, got {s:?}"))),
        }
    }

    // ---- primitives -----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        ensure!(k == k2, "matmul: inner dimensions {k} and {k2} differ");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Adds a length-N bias to every row of an M×N matrix.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "add_bias")?;
        ensure!(
            self.shape(b) == [n],
            "add_bias: bias shape {:?} does not match {n} columns",
            self.shape(b)
        );
        let bias = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.any_grad(&[x, b]);
        Ok(self.push(value, Op::AddBias(x, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    fn elementwise(
        &mut self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        self.binary_same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// x + c elementwise.
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v + c, Op::Offset(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Dilated 1-D convolution over the time axis of an L×C_in map with
    /// zero "same" padding, so the output is L×C_out.
    ///
    /// `w` has shape k×C_in×C_out and `b` has shape C_out. Tap `j` reads
    /// input row `t + j·d − ⌊(k−1)·d/2⌋`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, dilation: usize) -> Result<Var> {
        ensure!(dilation >= 1, "conv1d: dilation must be positive");
        let (len, c_in) = self.matrix_dims(x, "conv1d")?;
        ensure!(len >= 1, "conv1d: empty sequence");
        let (k, wc_in, c_out) = match *self.shape(w) {
            [k, ci, co] => (k, ci, co),
            ref s => return Err(Error::invalid(format!("conv1d: kernel shape {s:?}"))),
        };
        ensure!(k >= 1, "conv1d: kernel size must be positive");
        ensure!(
            wc_in == c_in,
            "conv1d: kernel expects {wc_in} input channels, input has {c_in}"
        );
        ensure!(
            self.shape(b) == [c_out],
            "conv1d: bias shape {:?} for {c_out} outputs",
            self.shape(b)
        );
        let pad = (k - 1) * dilation / 2;
        let xs = self.value(x).data();
        let ws = self.value(w).data();
        let mut out = Vec::with_capacity(len * c_out);
        for _ in 0..len {
            out.extend_from_slice(self.value(b).data());
        }
        for t in 0..len {
            let row = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..k {
                let Some(src) = (t + j * dilation).checked_sub(pad).filter(|&s| s < len) else {
                    continue;
                };
                let xrow = &xs[src * c_in..(src + 1) * c_in];
                let wtap = &ws[j * c_in * c_out..(j + 1) * c_in * c_out];
                for (c, &xv) in xrow.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    for (o, &wv) in row.iter_mut().zip(&wtap[c * c_out..(c + 1) * c_out]) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![len, c_out], out)?;
        let rg = self.any_grad(&[x, w, b]);
        Ok(self.push(value, Op::Conv1d { x, w, b, dilation }, rg))
    }

    /// Reduces `axis` by max or mean. Max routes its adjoint to the first
    /// maximal element.
    pub fn pool(&mut self, x: Var, axis: usize, mode: PoolMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), "pool: axis {axis} out of range for {shape:?}");
        ensure!(shape[axis] >= 1, "pool: empty axis {axis}");
        let (outer, ext, inner) = Tensor::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if mode == PoolMode::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |e: usize| src[(o * ext + e) * inner + i];
                let slot = o * inner + i;
                match mode {
                    PoolMode::Max => {
                        let mut best = 0;
                        for e in 1..ext {
                            if at(e) > at(best) {
                                best = e;
                            }
                        }
                        argmax[slot] = best;
                        out[slot] = at(best);
                    }
                    PoolMode::Mean => {
                        out[slot] = (0..ext).map(at).sum::<f64>() / ext as f64;
                    }
                }
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::Pool {
                x,
                axis,
                mode,
                argmax,
            },
            rg,
        ))
    }

    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        ensure!(
            sa.len() == sb.len() && axis < sa.len(),
            "concat: ranks {:?} / {:?} on axis {axis}",
            sa,
            sb
        );
        for d in 0..sa.len() {
            ensure!(
                d == axis || sa[d] == sb[d],
                "concat: extent mismatch on axis {d}: {:?} vs {:?}",
                sa,
                sb
            );
        }
        let (outer, ea, inner) = Tensor::axis_split(&sa, axis);
        let eb = sb[axis];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = Vec::with_capacity(da.len() + db.len());
        for o in 0..outer {
            out.extend_from_slice(&da[o * ea * inner..(o + 1) * ea * inner]);
            out.extend_from_slice(&db[o * eb * inner..(o + 1) * eb * inner]);
        }
        let mut shape = sa;
        shape[axis] = ea + eb;
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Concat { a, b, axis }, rg))
    }

    /// Stacks equally shaped tensors along a new axis inserted at `axis`.
    pub fn stack(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!inputs.is_empty(), "stack: no inputs");
        let shape = self.shape(inputs[0]).to_vec();
        ensure!(axis <= shape.len(), "stack: axis {axis} out of range");
        for &v in inputs {
            ensure!(
                self.shape(v) == shape.as_slice(),
                "stack: shape {:?} vs {:?}",
                self.shape(v),
                shape
            );
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let mut out = Vec::with_capacity(outer * inner * inputs.len());
        for o in 0..outer {
            for &v in inputs {
                out.extend_from_slice(&self.value(v).data()[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, inputs.len());
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Stack {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// `len` consecutive entries of `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        ensure!(axis < shape.len(), "slice: axis {axis} out of range");
        ensure!(
            start + len <= shape[axis],
            "slice: [{start}, {}) exceeds extent {}",
            start + len,
            shape[axis]
        );
        let (outer, ext, inner) = Tensor::axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        ensure!(n > 0, "mean of an empty tensor");
        let s = self.value(x).data().iter().sum::<f64>() / n as f64;
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean-pools an L×C map down to `out_len` rows; row `i` averages input
    /// rows `[⌊i·L/out_len⌋, ⌊(i+1)·L/out_len⌋)`.
    pub fn adaptive_mean_pool(&mut self, x: Var, out_len: usize) -> Result<Var> {
        let (len, c) = self.matrix_dims(x, "adaptive_mean_pool")?;
        ensure!(
            out_len >= 1 && len >= out_len,
            "adaptive_mean_pool: cannot pool {len} rows into {out_len}"
        );
        let src = self.value(x).data();
        let mut out = vec![0.0; out_len * c];
        for i in 0..out_len {
            let (lo, hi) = pool_bin(len, out_len, i);
            let row = &mut out[i * c..(i + 1) * c];
            for r in lo..hi {
                for (o, v) in row.iter_mut().zip(&src[r * c..(r + 1) * c]) {
                    *o += v;
                }
            }
            let n = (hi - lo) as f64;
            row.iter_mut().for_each(|o| *o /= n);
        }
        let value = Tensor::new(vec![out_len, c], out)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::AdaptiveMeanPool { x, out_len }, rg))
    }

    /// Repeats a 1×N row `rows` times.
    pub fn expand_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, n) = self.matrix_dims(x, "expand_rows")?;
        ensure!(r == 1, "expand_rows: expected a single row, got {r}");
        let row = self.value(x).data().to_vec();
        let value = Tensor::new(vec![rows, n], row.repeat(rows))?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::ExpandRows(x), rg))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Propagates d`loss`/d· to every node that requires a gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let value = self.value(loss);
        ensure!(
            value.numel() == 1,
            "backward: loss must be a scalar, got shape {:?}",
            value.shape()
        );
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(value.shape()));
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let mut contributions = self.adjoint(node, &g);
            if self.fault == Some(node.op.kind()) {
                for (_, t) in &mut contributions {
                    t.data_mut().iter_mut().for_each(|v| *v *= 1.5);
                }
            }
            for (var, contrib) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot @ None => *slot = Some(contrib),
                }
            }
            grads[idx] = Some(g);
        }
        // Nodes that require a gradient but are not upstream of the loss
        // still get an explicit zero.
        for (idx, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[idx].is_none() {
                grads[idx] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn adjoint(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| self.value(v);
        let gd = g.data();
        let shaped = |like: &Tensor, data: Vec<f64>| {
            Tensor::new(like.shape().to_vec(), data).expect("adjoint shape")
        };
        match &node.op {
            Op::Leaf => Vec::new(),
            &Op::MatMul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let mut out = Vec::new();
                if self.requires_grad(a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let brow = &bv.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = gd[i * n..(i + 1) * n]
                                .iter()
                                .zip(brow)
                                .map(|(x, y)| x * y)
                                .sum();
                        }
                    }
                    out.push((a, shaped(av, ga)));
                }
                if self.requires_grad(b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        for p in 0..k {
                            let x = av.data()[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(&gd[i * n..(i + 1) * n]) {
                                *o += x * gv;
                            }
                        }
                    }
                    out.push((b, shaped(bv, gb)));
                }
                out
            }
            &Op::AddBias(x, b) => {
                let n = val(b).numel();
                let mut gb = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(x, g.clone()), (b, shaped(val(b), gb))]
            }
            &Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            &Op::Sub(a, b) => vec![(a, g.clone()), (b, g.map(|v| -v))],
            &Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                let ga = gd.iter().zip(bv.data()).map(|(x, y)| x * y).collect();
                let gb = gd.iter().zip(av.data()).map(|(x, y)| x * y).collect();
                vec![(a, shaped(av, ga)), (b, shaped(bv, gb))]
            }
            &Op::Scale(x, c) => vec![(x, g.map(|v| v * c))],
            &Op::Offset(x) => vec![(x, g.clone())],
            &Op::Relu(x) => {
                let d = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                vec![(x, shaped(g, d))]
            }
            &Op::Sigmoid(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * y * (1.0 - y))
                    .collect();
                vec![(x, shaped(g, d))]
            }
            &Op::Tanh(x) => {
                let d = gd
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, &y)| gv * (1.0 - y * y))
                    .collect();
                vec![(x, shaped(g, d))]
            }
            &Op::Abs(x) => {
                let d = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| if xv > 0.0 { *gv } else if xv < 0.0 { -gv } else { 0.0 })
                    .collect();
                vec![(x, shaped(g, d))]
            }
            &Op::Square(x) => {
                let d = gd
                    .iter()
                    .zip(val(x).data())
                    .map(|(gv, &xv)| 2.0 * xv * gv)
                    .collect();
                vec![(x, shaped(g, d))]
            }
            &Op::Conv1d { x, w, b, dilation } => conv1d_adjoint(self, x, w, b, dilation, g),
            Op::Pool {
                x,
                axis,
                mode,
                argmax,
            } => {
                let xv = val(*x);
                let (outer, ext, inner) = Tensor::axis_split(xv.shape(), *axis);
                let mut gx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        match mode {
                            PoolMode::Max => {
                                gx[(o * ext + argmax[slot]) * inner + i] += gd[slot];
                            }
                            PoolMode::Mean => {
                                for e in 0..ext {
                                    gx[(o * ext + e) * inner + i] += gd[slot] / ext as f64;
                                }
                            }
                        }
                    }
                }
                vec![(*x, shaped(xv, gx))]
            }
            &Op::Concat { a, b, axis } => {
                let (av, bv) = (val(a), val(b));
                let (outer, ea, inner) = Tensor::axis_split(av.shape(), axis);
                let eb = bv.shape()[axis];
                let mut ga = Vec::with_capacity(av.numel());
                let mut gb = Vec::with_capacity(bv.numel());
                let stride = (ea + eb) * inner;
                for o in 0..outer {
                    let base = o * stride;
                    ga.extend_from_slice(&gd[base..base + ea * inner]);
                    gb.extend_from_slice(&gd[base + ea * inner..base + stride]);
                }
                vec![(a, shaped(av, ga)), (b, shaped(bv, gb))]
            }
            Op::Stack { inputs, axis } => {
                let shape = val(inputs[0]).shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis..].iter().product();
                let n = inputs.len();
                inputs
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| {
                        let mut gv = Vec::with_capacity(outer * inner);
                        for o in 0..outer {
                            let base = (o * n + j) * inner;
                            gv.extend_from_slice(&gd[base..base + inner]);
                        }
                        (v, shaped(val(v), gv))
                    })
                    .collect()
            }
            &Op::Reshape(x) => vec![(x, shaped(val(x), gd.to_vec()))],
            &Op::Slice { x, axis, start } => {
                let xv = val(x);
                let (outer, ext, inner) = Tensor::axis_split(xv.shape(), axis);
                let len = node.value.shape()[axis];
                let mut gx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                vec![(x, shaped(xv, gx))]
            }
            &Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), gd[0]))],
            &Op::Mean(x) => {
                let n = val(x).numel() as f64;
                vec![(x, Tensor::full(val(x).shape(), gd[0] / n))]
            }
            &Op::AdaptiveMeanPool { x, out_len } => {
                let xv = val(x);
                let (len, c) = (xv.shape()[0], xv.shape()[1]);
                let mut gx = vec![0.0; xv.numel()];
                for i in 0..out_len {
                    let (lo, hi) = pool_bin(len, out_len, i);
                    let n = (hi - lo) as f64;
                    for r in lo..hi {
                        for ch in 0..c {
                            gx[r * c + ch] += gd[i * c + ch] / n;
                        }
                    }
                }
                vec![(x, shaped(xv, gx))]
            }
            &Op::ExpandRows(x) => {
                let n = val(x).numel();
                let mut gx = vec![0.0; n];
                for row in gd.chunks(n) {
                    for (o, v) in gx.iter_mut().zip(row) {
                        *o += v;
                    }
                }
                vec![(x, shaped(val(x), gx))]
            }
        }
    }
}

fn conv1d_adjoint(tape: &Tape, x: Var, w: Var, b: Var, dilation: usize, g: &Tensor) -> Vec<(Var, Tensor)> {
    let (xv, wv, bv) = (tape.value(x), tape.value(w), tape.value(b));
    let (len, c_in) = (xv.shape()[0], xv.shape()[1]);
    let (k, c_out) = (wv.shape()[0], wv.shape()[2]);
    let pad = (k - 1) * dilation / 2;
    let gd = g.data();
    let mut gx = vec![0.0; xv.numel()];
    let mut gw = vec![0.0; wv.numel()];
    let mut gb = vec![0.0; c_out];
    for t in 0..len {
        let grow = &gd[t * c_out..(t + 1) * c_out];
        for (o, v) in gb.iter_mut().zip(grow) {
            *o += v;
        }
        for j in 0..k {
            let Some(src) = (t + j * dilation).checked_sub(pad).filter(|&s| s < len) else {
                continue;
            };
            for c in 0..c_in {
                let xval = xv.data()[src * c_in + c];
                let woff = (j * c_in + c) * c_out;
                let wrow = &wv.data()[woff..woff + c_out];
                let mut acc = 0.0;
                for o in 0..c_out {
                    acc += grow[o] * wrow[o];
                    gw[woff + o] += grow[o] * xval;
                }
                gx[src * c_in + c] += acc;
            }
        }
    }
    let mk = |like: &Tensor, d: Vec<f64>| Tensor::new(like.shape().to_vec(), d).expect("adjoint shape");
    vec![(x, mk(xv, gx)), (w, mk(wv, gw)), (b, mk(bv, gb))]
}

/// Half-open bin `[⌊i·len/bins⌋, ⌊(i+1)·len/bins⌋)`.
pub fn pool_bin(len: usize, bins: usize, i: usize) -> (usize, usize) {
    (i * len / bins, (i + 1) * len / bins)
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * k + p];
            if x == 0.0 {
                continue;
            }
            for (o, y) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += x * y;
            }
        }
    }
    out
}
