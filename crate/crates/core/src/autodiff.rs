//! Tape-based reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Graph`] records every operation in creation order, so the tape is
//! topologically sorted by construction. [`Graph::backward`] walks it in
//! reverse from a scalar root and returns a gradient for every node that
//! requires one; fan-out is handled by accumulation. One graph is built per
//! training step and dropped afterwards.
//!
//! Sequence tensors use the `[batch, time, channels]` layout throughout.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv1d { x: Var, w: Var, stride: usize },
    Relu(Var),
    Exp(Var),
    Ln(Var),
    Square(Var),
    Abs(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    L2Norm(Var),
    Concat(Var, Var),
    BroadcastTime(Var),
    GatherRows { x: Var, idx: Vec<usize> },
    LogSumExp(Var),
    Reshape(Var),
    SliceTime(Var),
    StraightThrough(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// The recording tape plus the forward values of every node.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros when `v` is not on a path to the root.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// True when some path connected `v` to the root.
    pub fn reached(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }
}

/// Splits `shape` around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.to_vec();
    s.remove(axis);
    if s.is_empty() {
        s.push(1);
    }
    s
}

fn out_len(t: usize, stride: usize) -> usize {
    t.div_ceil(stride)
}

/// Builds the im2col matrix `[batch*t_out, kernel*cin]` for a same-padded conv.
fn im2col(x: &[f64], b: usize, t: usize, cin: usize, kernel: usize, stride: usize) -> Vec<f64> {
    let t_out = out_len(t, stride);
    let pad = (kernel - 1) / 2;
    let width = kernel * cin;
    let mut col = vec![0.0; b * t_out * width];
    for bi in 0..b {
        for to in 0..t_out {
            let row = &mut col[(bi * t_out + to) * width..(bi * t_out + to + 1) * width];
            for k in 0..kernel {
                let ti = (to * stride + k) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let src = &x[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                row[k * cin..(k + 1) * cin].copy_from_slice(src);
            }
        }
    }
    col
}

fn col2im_add(
    col: &[f64],
    gx: &mut [f64],
    b: usize,
    t: usize,
    cin: usize,
    kernel: usize,
    stride: usize,
) {
    let t_out = out_len(t, stride);
    let pad = (kernel - 1) / 2;
    let width = kernel * cin;
    for bi in 0..b {
        for to in 0..t_out {
            let row = &col[(bi * t_out + to) * width..(bi * t_out + to + 1) * width];
            for k in 0..kernel {
                let ti = (to * stride + k) as isize - pad as isize;
                if ti < 0 || ti >= t as isize {
                    continue;
                }
                let dst = &mut gx[(bi * t + ti as usize) * cin..(bi * t + ti as usize + 1) * cin];
                for (d, s) in dst.iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                    *d += s;
                }
            }
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn grad_any(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A leaf that receives gradients.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient: a detached copy of `v`.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[x.0].value.map(f);
        let ng = self.grad_any(&[x]);
        self.push(value, op, ng)
    }

    /// Elementwise binary op; `b` may equal `a`'s shape or a suffix of it (broadcast).
    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let broadcast = sa != sb;
        if broadcast && (sb.len() > sa.len() || sa[sa.len() - sb.len()..] != sb[..]) {
            return Err(Error::shape(format!("elementwise op on {sa:?} and {sb:?}")));
        }
        if broadcast && matches!(op, Op::Mul(..)) {
            return Err(Error::shape(format!(
                "mul requires equal shapes, got {sa:?} and {sb:?}"
            )));
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let n = bv.len();
        let data: Vec<f64> = av
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bv[i % n]))
            .collect();
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Tensor::new(&sa, data)?, op, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Op::AddScalar(x), |v| v + c)
    }

    /// `a[..., k] · b[k, n]`, treating all leading axes of `a` as rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(Error::shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.value(a).numel() / k;
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul(a, b), ng))
    }

    /// Same-padded 1-D convolution. `x: [B, T, Cin]`, `w: [K, Cin, Cout]`;
    /// output `[B, ceil(T/stride), Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::invalid("conv1d stride must be >= 1"));
        }
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sx.len() != 3 || sw.len() != 3 || sx[2] != sw[1] {
            return Err(Error::shape(format!(
                "conv1d input {sx:?} with kernel {sw:?}"
            )));
        }
        let (b, t, cin) = (sx[0], sx[1], sx[2]);
        let (kernel, cout) = (sw[0], sw[2]);
        let t_out = out_len(t, stride);
        let col = im2col(self.value(x).data(), b, t, cin, kernel, stride);
        let mut out = vec![0.0; b * t_out * cout];
        gemm(
            b * t_out,
            kernel * cin,
            cout,
            &col,
            false,
            self.value(w).data(),
            false,
            &mut out,
            false,
        );
        let ng = self.grad_any(&[x, w]);
        Ok(self.push(
            Tensor::new(&[b, t_out, cout], out)?,
            Op::Conv1d { x, w, stride },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| v.max(0.0))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Op::Ln(x), f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Op::Square(x), |v| v * v)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// Clamp to `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.grad_any(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let ng = self.grad_any(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), ng)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(format!(
                "axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let data = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let src = &data[(o * n + a) * inner..(o * n + a + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v /= n as f64);
        }
        let op = if mean {
            Op::MeanAxis { x, axis }
        } else {
            Op::SumAxis { x, axis }
        };
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(&reduced_shape(&shape, axis), out)?, op, ng))
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Euclidean norm of the whole tensor.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let n = self.value(x).l2_norm();
        let ng = self.grad_any(&[x]);
        self.push(Tensor::scalar(n), Op::L2Norm(x), ng)
    }

    /// Concatenate along the last (channel) axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(Error::shape(format!("concat {sa:?} with {sb:?}")));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let (wa, wb) = (va.last_dim(), vb.last_dim());
        let mut data = Vec::with_capacity(va.numel() + vb.numel());
        for r in 0..va.rows() {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let mut shape = sa;
        *shape.last_mut().unwrap() = wa + wb;
        let ng = self.grad_any(&[a, b]);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(a, b), ng))
    }

    /// `[B, D] -> [B, T, D]` by repeating each row over time.
    pub fn broadcast_time(&mut self, x: Var, t: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || t == 0 {
            return Err(Error::shape(format!(
                "broadcast_time expects [B, D], got {s:?}"
            )));
        }
        let v = self.value(x);
        let mut data = Vec::with_capacity(s[0] * t * s[1]);
        for b in 0..s[0] {
            for _ in 0..t {
                data.extend_from_slice(v.row(b));
            }
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], t, s[1]], data)?,
            Op::BroadcastTime(x),
            ng,
        ))
    }

    /// Select rows (last-axis vectors) by index: output `[idx.len(), D]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let rows = v.rows();
        if idx.is_empty() {
            return Err(Error::invalid("gather_rows with no indices"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape(format!(
                "gather index {bad} out of {rows} rows"
            )));
        }
        let d = v.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(v.row(i));
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(
            Tensor::new(&[idx.len(), d], data)?,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        ))
    }

    /// Stabilized log-sum-exp over the last axis, removing it.
    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out: Vec<f64> = (0..v.rows())
            .map(|r| {
                let row = v.row(r);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                if m == f64::NEG_INFINITY {
                    return m;
                }
                m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
            })
            .collect();
        let shape = reduced_shape(v.shape(), v.shape().len() - 1);
        let ng = self.grad_any(&[x]);
        self.push(
            Tensor::new(&shape, out).expect("lse shape"),
            Op::LogSumExp(x),
            ng,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let ng = self.grad_any(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Keep the first `len` time steps of `[B, T, C]`.
    pub fn slice_time(&mut self, x: Var, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || len == 0 || len > s[1] {
            return Err(Error::shape(format!("slice_time({len}) of {s:?}")));
        }
        let v = self.value(x).data();
        let mut data = Vec::with_capacity(s[0] * len * s[2]);
        for b in 0..s[0] {
            data.extend_from_slice(&v[b * s[1] * s[2]..(b * s[1] + len) * s[2]]);
        }
        let ng = self.grad_any(&[x]);
        Ok(self.push(Tensor::new(&[s[0], len, s[2]], data)?, Op::SliceTime(x), ng))
    }

    /// Forward value is `quantized`; the backward rule passes the incoming
    /// gradient to `z` unchanged. `quantized` itself gets no gradient.
    pub fn straight_through(&mut self, z: Var, quantized: Tensor) -> Result<Var> {
        if self.shape(z) != quantized.shape() {
            return Err(Error::shape(format!(
                "straight-through {:?} vs {:?}",
                self.shape(z),
                quantized.shape()
            )));
        }
        let ng = self.grad_any(&[z]);
        Ok(self.push(quantized, Op::StraightThrough(z), ng))
    }

    /// Reverse pass from a scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if !self.value(root).is_scalar() {
            return Err(Error::shape(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        let n = root.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Interior nodes keep their gradients too; harmless and handy for tests.
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                });
                self.accumulate(grads, *b, |gb| {
                    let n = gb.len();
                    for (i, s) in g.iter().enumerate() {
                        gb[i % n] += sign * s;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.accumulate(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, |gx| {
                gx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s)
            }),
            Op::AddScalar(x) | Op::StraightThrough(x) | Op::Reshape(x) => {
                self.accumulate(grads, *x, |gx| {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s)
                })
            }
            Op::MatMul(a, b) => {
                let sb = self.nodes[b.0].value.shape();
                let (k, n) = (sb[0], sb[1]);
                let m = g.len() / n;
                self.accumulate(grads, *a, |ga| {
                    gemm(m, n, k, g, false, val(*b), true, ga, true);
                });
                self.accumulate(grads, *b, |gb| {
                    gemm(k, m, n, val(*a), true, g, false, gb, true);
                });
            }
            Op::Conv1d { x, w, stride } => {
                let sx = self.nodes[x.0].value.shape();
                let sw = self.nodes[w.0].value.shape();
                let (b, t, cin) = (sx[0], sx[1], sx[2]);
                let (kernel, cout) = (sw[0], sw[2]);
                let rows = b * out_len(t, *stride);
                if self.nodes[w.0].needs_grad {
                    let col = im2col(val(*x), b, t, cin, kernel, *stride);
                    self.accumulate(grads, *w, |gw| {
                        gemm(kernel * cin, rows, cout, &col, true, g, false, gw, true);
                    });
                }
                if self.nodes[x.0].needs_grad {
                    let mut gcol = vec![0.0; rows * kernel * cin];
                    gemm(
                        rows,
                        cout,
                        kernel * cin,
                        g,
                        false,
                        val(*w),
                        true,
                        &mut gcol,
                        false,
                    );
                    self.accumulate(grads, *x, |gx| {
                        col2im_add(&gcol, gx, b, t, cin, kernel, *stride);
                    });
                }
            }
            Op::Relu(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(x) => {
                let ov = out.data();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * ov[i];
                    }
                });
            }
            Op::Ln(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += g[i] / xv[i];
                    }
                });
            }
            Op::Square(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += 2.0 * xv[i] * g[i];
                    }
                });
            }
            Op::Abs(x) => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        // sign(0) = 0
                        let s = if xv[i] > 0.0 {
                            1.0
                        } else if xv[i] < 0.0 {
                            -1.0
                        } else {
                            0.0
                        };
                        gx[i] += s * g[i];
                    }
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = val(*x);
                self.accumulate(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|d| *d += g[0]))
            }
            Op::MeanAll(x) => self.accumulate(grads, *x, |gx| {
                let s = g[0] / gx.len() as f64;
                gx.iter_mut().for_each(|d| *d += s)
            }),
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let (outer, n, inner) = split_axis(self.nodes[x.0].value.shape(), *axis);
                let c = if matches!(op, Op::MeanAxis { .. }) {
                    1.0 / n as f64
                } else {
                    1.0
                };
                self.accumulate(grads, *x, |gx| {
                    for o in 0..outer {
                        for a in 0..n {
                            let dst = &mut gx[(o * n + a) * inner..(o * n + a + 1) * inner];
                            for (d, s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += c * s;
                            }
                        }
                    }
                });
            }
            Op::L2Norm(x) => {
                let norm = out.item();
                if norm > 0.0 {
                    let xv = val(*x);
                    self.accumulate(grads, *x, |gx| {
                        for i in 0..gx.len() {
                            gx[i] += g[0] * xv[i] / norm;
                        }
                    });
                } else {
                    self.accumulate(grads, *x, |_| {});
                }
            }
            Op::Concat(a, b) => {
                let wa = self.nodes[a.0].value.last_dim();
                let wb = self.nodes[b.0].value.last_dim();
                let rows = out.rows();
                self.accumulate(grads, *a, |ga| {
                    for r in 0..rows {
                        for c in 0..wa {
                            ga[r * wa + c] += g[r * (wa + wb) + c];
                        }
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for r in 0..rows {
                        for c in 0..wb {
                            gb[r * wb + c] += g[r * (wa + wb) + wa + c];
                        }
                    }
                });
            }
            Op::BroadcastTime(x) => {
                let s = out.shape();
                let (bsz, t, d) = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |gx| {
                    for b in 0..bsz {
                        for ti in 0..t {
                            for c in 0..d {
                                gx[b * d + c] += g[(b * t + ti) * d + c];
                            }
                        }
                    }
                });
            }
            Op::GatherRows { x, idx } => {
                let d = out.last_dim();
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        for c in 0..d {
                            gx[i * d + c] += g[r * d + c];
                        }
                    }
                });
            }
            Op::LogSumExp(x) => {
                let xt = &self.nodes[x.0].value;
                let w = xt.last_dim();
                let lse = out.data();
                self.accumulate(grads, *x, |gx| {
                    for r in 0..xt.rows() {
                        for (c, &z) in xt.row(r).iter().enumerate() {
                            gx[r * w + c] += g[r] * (z - lse[r]).exp();
                        }
                    }
                });
            }
            Op::SliceTime(x) => {
                let sx = self.nodes[x.0].value.shape();
                let (bsz, t, c) = (sx[0], sx[1], sx[2]);
                let len = out.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for b in 0..bsz {
                        let dst = &mut gx[b * t * c..(b * t + len) * c];
                        for (d, s) in dst.iter_mut().zip(&g[b * len * c..(b + 1) * len * c]) {
                            *d += s;
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv_stride_two_halves_length() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 16, 2], 1.0));
        let w = g.leaf(Tensor::full(&[3, 2, 4], 0.1));
        let y = g.conv1d(x, w, 2).unwrap();
        assert_eq!(g.shape(y), &[1, 8, 4]);
        let x7 = g.constant(Tensor::full(&[1, 7, 2], 1.0));
        let y7 = g.conv1d(x7, w, 2).unwrap();
        assert_eq!(g.shape(y7), &[1, 4, 4]);
    }

    #[test]
    fn conv_rejects_bad_stride_and_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 4, 2], 1.0));
        let w = g.leaf(Tensor::full(&[3, 3, 4], 0.1));
        let err = g.conv1d(x, w, 1).unwrap_err().to_string();
        assert!(
            err.contains("[1, 4, 2]") && err.contains("[3, 3, 4]"),
            "{err}"
        );
        let w2 = g.leaf(Tensor::full(&[3, 2, 4], 0.1));
        assert!(g.conv1d(x, w2, 0).is_err());
    }

    #[test]
    fn relu_clips_negatives() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn logsumexp_of_zeros() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.logsumexp(x);
        assert!((g.value(y).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2, 3], &[1., -2., 3., 0.5, 9., -7.]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0; 6]);
    }

    #[test]
    fn mean_square_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[1.0, 2.0]));
        let sq = g.square(x);
        let m = g.mean(sq);
        let grads = g.backward(m).unwrap();
        assert_eq!(grads.get(x).data(), &[1.0, 2.0]);
    }

    #[test]
    fn norm_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let n = g.l2_norm(x);
        let grads = g.backward(n).unwrap();
        let gx = grads.get(x);
        assert!((gx.data()[0] - 0.6).abs() < 1e-12);
        assert!((gx.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn unreachable_leaf_gets_zero() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let y = g.leaf(t(&[3], &[1.0, 1.0, 1.0]));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(!grads.reached(y));
        assert_eq!(grads.get(y).data(), &[0.0; 3]);
    }

    #[test]
    fn fan_out_accumulates() {
        // f = sum(x*x) + sum(3x) -> 2x + 3
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 0.5]));
        let sq = g.square(x);
        let a = g.sum(sq);
        let sc = g.scale(x, 3.0);
        let b = g.sum(sc);
        let f = g.add(a, b).unwrap();
        let grads = g.backward(f).unwrap();
        assert_eq!(grads.get(x).data(), &[5.0, -1.0, 4.0]);
    }

    #[test]
    fn detached_leaf_receives_no_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[2], &[3.0, 4.0]));
        let d = g.detach(x);
        let p = g.mul(x, d).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).data(), &[3.0, 4.0]);
        assert!(!grads.reached(d));
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::full(&[2, 3, 4], 1.0));
        let b = g.leaf(Tensor::full(&[4], 0.5));
        let y = g.add(x, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(b).data(), &[6.0; 4]);
        let bad = g.leaf(Tensor::full(&[3], 0.5));
        assert!(g.add(x, bad).is_err());
    }
}
