//! Operation tape and reverse-mode gradient sweep.
//!
//! Every primitive appends a node whose index is larger than the indices of
//! its inputs, so node order is already a topological order and the backward
//! sweep simply walks the node list from the output down to zero.

use crate::kernels::{PadMode, Window};
use crate::tensor::{Element, Tensor};
use crate::{Result, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride, padding and padding mode of a 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Conv2dParams {
    pub stride: usize,
    pub pad: usize,
    pub pad_mode: PadMode,
}

impl Conv2dParams {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            pad_mode: PadMode::Zero,
        }
    }

    pub fn reflect(stride: usize, pad: usize) -> Self {
        Self {
            stride,
            pad,
            pad_mode: PadMode::Reflect,
        }
    }
}

/// Identifies the primitive a tape node was produced by.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    ScalarMul,
    MatMul,
    Conv2d,
    ConvTranspose2d,
    Relu,
    Silu,
    Mean,
    Sum,
    Reshape,
    Concat,
    Embedding,
    LogSoftmax,
    GroupNorm,
}

/// How the right operand of [`Tape::add`] maps onto the left operand.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Full,
    Scalar,
    /// rhs `(C)` against lhs `(B, C, ...)`.
    Channel,
    /// rhs `(B, C)` against lhs `(B, C, ...)`.
    SampleChannel,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var),
    ScalarMul(Var, f64),
    MatMul(Var, Var),
    Conv2d(Var, Var, Conv2dParams),
    ConvTranspose2d(Var, Var, usize, usize),
    Relu(Var),
    Silu(Var),
    Mean(Var, usize),
    Sum(Var, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Embedding(Var, Vec<usize>),
    LogSoftmax(Var),
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        /// `(mean, 1/sqrt(var + eps))` per (sample, group).
        stats: Vec<(f64, f64)>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::ScalarMul(..) => OpKind::ScalarMul,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Conv2d(..) => OpKind::Conv2d,
            Op::ConvTranspose2d(..) => OpKind::ConvTranspose2d,
            Op::Relu(..) => OpKind::Relu,
            Op::Silu(..) => OpKind::Silu,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Concat(..) => OpKind::Concat,
            Op::Embedding(..) => OpKind::Embedding,
            Op::LogSoftmax(..) => OpKind::LogSoftmax,
            Op::GroupNorm { .. } => OpKind::GroupNorm,
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Stabilizer added to the group variance.
pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Records primitive applications for one forward pass.
///
/// A tape is single-threaded; independent tapes may live on separate threads.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    /// Outputs that have already been backpropagated.
    consumed: Vec<Var>,
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Whether any output of this tape has been backpropagated.
    pub fn is_consumed(&self) -> bool {
        !self.consumed.is_empty()
    }

    /// Number of recorded nodes produced by `kind`.
    pub fn count_ops(&self, kind: OpKind) -> usize {
        self.nodes.iter().filter(|n| n.op.kind() == kind).count()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient stored on a leaf by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(op_name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> TensorError {
        TensorError::Shape {
            op,
            shapes: vars.iter().map(|v| self.shape(*v).to_vec()).collect(),
        }
    }

    fn broadcast_kind(&self, a: Var, b: Var) -> Option<Broadcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            Some(Broadcast::Full)
        } else if sb.iter().product::<usize>() == 1 {
            Some(Broadcast::Scalar)
        } else if sa.len() >= 2 && sb.len() == 1 && sb[0] == sa[1] {
            Some(Broadcast::Channel)
        } else if sa.len() >= 2 && sb.len() == 2 && sb == &sa[..2] {
            Some(Broadcast::SampleChannel)
        } else {
            None
        }
    }

    /// Elementwise sum. `b` may also be a scalar, a per-channel bias `(C)`,
    /// or a per-sample per-channel bias `(B, C)` against `a: (B, C, ...)`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = self
            .broadcast_kind(a, b)
            .ok_or_else(|| self.shape_err("add", &[a, b]))?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let mut out = av.clone();
        let (outer, ch, inner) = split_bc(av.shape());
        match bc {
            Broadcast::Full => out.data_mut().iter_mut().zip(bv).for_each(|(o, &x)| *o = *o + x),
            Broadcast::Scalar => out.data_mut().iter_mut().for_each(|o| *o = *o + bv[0]),
            Broadcast::Channel | Broadcast::SampleChannel => {
                let data = out.data_mut();
                for n in 0..outer {
                    for c in 0..ch {
                        let bias = if bc == Broadcast::Channel { bv[c] } else { bv[n * ch + c] };
                        let base = (n * ch + c) * inner;
                        data[base..base + inner].iter_mut().for_each(|o| *o = *o + bias);
                    }
                }
            }
        }
        self.push("add", out, Op::Add(a, b, bc), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("sub", &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", &[a, b]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let k = T::from_f64(s);
        let out = self.value(a).map(|x| x * k);
        self.push("scalar_mul", out, Op::ScalarMul(a, s), &[a])
    }

    /// Adds a constant scalar (composed as `add` with a constant leaf).
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let c = self.constant(Tensor::scalar(T::from_f64(s)));
        self.add(a, c)
    }

    /// `(M, K) @ (K, N)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let out = Tensor::new(vec![m, n], out)?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    fn conv_window(&self, x: Var, w: Var, p: Conv2dParams) -> Result<(Window, usize, usize)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(self.shape_err("conv2d", &[x, w]));
        }
        let win = Window {
            channels: sx[1],
            height: sx[2],
            width: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride: p.stride,
            pad: p.pad,
            mode: p.pad_mode,
        };
        if p.stride == 0 || sx[2] + 2 * p.pad < sw[2] || sx[3] + 2 * p.pad < sw[3] {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                detail: format!("kernel {:?} does not fit input {:?} with {p:?}", sw, sx),
            });
        }
        if p.pad_mode == PadMode::Reflect && (p.pad >= sx[2] || p.pad >= sx[3]) {
            return Err(TensorError::InvalidParam {
                op: "conv2d",
                detail: format!("reflect padding {} needs extent > pad, got {:?}", p.pad, sx),
            });
        }
        Ok((win, sx[0], sw[0]))
    }

    /// Cross-correlation of `x: (B, Cin, H, W)` with `w: (Cout, Cin, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var, p: Conv2dParams) -> Result<Var> {
        let (win, batch, cout) = self.conv_window(x, w, p)?;
        let (rows, ncol) = (win.col_rows(), win.col_cols());
        let in_len = win.channels * win.height * win.width;
        let mut cols = vec![T::zero(); rows * ncol];
        let mut out = vec![T::zero(); batch * cout * ncol];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..batch {
            win.im2col(&xv[b * in_len..(b + 1) * in_len], &mut cols);
            T::gemm(cout, rows, ncol, wv, false, &cols, false, &mut out[b * cout * ncol..(b + 1) * cout * ncol], false);
        }
        let out = Tensor::new(vec![batch, cout, win.out_height(), win.out_width()], out)?;
        self.push("conv2d", out, Op::Conv2d(x, w, p), &[x, w])
    }

    fn transpose_window(&self, x: Var, w: Var, stride: usize, pad: usize) -> Result<(Window, usize)> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[0] || stride == 0 {
            return Err(self.shape_err("conv_transpose2d", &[x, w]));
        }
        let ho = ((sx[2] - 1) * stride + sw[2]).checked_sub(2 * pad);
        let wo = ((sx[3] - 1) * stride + sw[3]).checked_sub(2 * pad);
        let (Some(ho), Some(wo)) = (ho, wo) else {
            return Err(TensorError::InvalidParam {
                op: "conv_transpose2d",
                detail: format!("padding {pad} too large for input {sx:?}"),
            });
        };
        // The transposed conv is the adjoint of a conv on the output grid.
        let win = Window {
            channels: sw[1],
            height: ho,
            width: wo,
            kh: sw[2],
            kw: sw[3],
            stride,
            pad,
            mode: PadMode::Zero,
        };
        debug_assert_eq!(win.out_height(), sx[2]);
        Ok((win, sx[0]))
    }

    /// Transposed convolution of `x: (B, Cin, H, W)` with `w: (Cin, Cout, kh, kw)`,
    /// producing `(B, Cout, (H-1)·s - 2p + kh, (W-1)·s - 2p + kw)`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let (win, batch) = self.transpose_window(x, w, stride, pad)?;
        let cin = self.shape(x)[1];
        let (rows, ncol) = (win.col_rows(), win.col_cols());
        let out_len = win.channels * win.height * win.width;
        let mut cols = vec![T::zero(); rows * ncol];
        let mut out = vec![T::zero(); batch * out_len];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for b in 0..batch {
            T::gemm(rows, cin, ncol, wv, true, &xv[b * cin * ncol..(b + 1) * cin * ncol], false, &mut cols, false);
            win.col2im(&cols, &mut out[b * out_len..(b + 1) * out_len]);
        }
        let out = Tensor::new(vec![batch, win.channels, win.height, win.width], out)?;
        self.push("conv_transpose2d", out, Op::ConvTranspose2d(x, w, stride, pad), &[x, w])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push("relu", out, Op::Relu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x / (T::one() + (-x).exp()));
        self.push("silu", out, Op::Silu(a), &[a])
    }

    fn reduce(&mut self, a: Var, keep: usize, mean: bool) -> Result<Var> {
        let name = if mean { "mean" } else { "sum" };
        let shape = self.shape(a).to_vec();
        if keep > shape.len() {
            return Err(self.shape_err(name, &[a]));
        }
        let outer: usize = shape[..keep].iter().product();
        let inner: usize = shape[keep..].iter().product();
        let data = self.value(a).data();
        let out: Vec<T> = (0..outer)
            .map(|o| {
                let s: f64 = data[o * inner..(o + 1) * inner].iter().map(|v| v.as_f64()).sum();
                T::from_f64(if mean { s / inner as f64 } else { s })
            })
            .collect();
        let out = Tensor::new(shape[..keep].to_vec(), out)?;
        let op = if mean { Op::Mean(a, keep) } else { Op::Sum(a, keep) };
        self.push(name, out, op, &[a])
    }

    /// Mean over every axis after the first `keep` axes (64-bit accumulator).
    pub fn mean(&mut self, a: Var, keep: usize) -> Result<Var> {
        self.reduce(a, keep, true)
    }

    /// Sum over every axis after the first `keep` axes (64-bit accumulator).
    pub fn sum(&mut self, a: Var, keep: usize) -> Result<Var> {
        self.reduce(a, keep, false)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or(TensorError::InvalidParam {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(self.shape_err("concat", parts));
        }
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &e)| i != axis && e != base[i]) {
                return Err(self.shape_err("concat", parts));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|&p| self.shape(p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push("concat", out, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Gathers rows of `table: (N, D)`, giving `(indices.len(), D)`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(self.shape_err("embedding", &[table]));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(TensorError::InvalidParam {
                op: "embedding",
                detail: format!("index {bad} out of range for table of {} rows", s[0]),
            });
        }
        let d = s[1];
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&tv[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(vec![indices.len(), d], data)?;
        self.push("embedding", out, Op::Embedding(table, indices.to_vec()), &[table])
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| self.shape_err("log_softmax", &[a]))?;
        let data = self.value(a).data();
        let mut out = vec![T::zero(); data.len()];
        for (row, dst) in data.chunks(c).zip(out.chunks_mut(c)) {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
            let lse = m + row.iter().map(|v| (v.as_f64() - m).exp()).sum::<f64>().ln();
            for (o, v) in dst.iter_mut().zip(row) {
                *o = T::from_f64(v.as_f64() - lse);
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push("log_softmax", out, Op::LogSoftmax(a), &[a])
    }

    /// Group normalization of `x: (B, C, ...)` with per-channel affine `gamma`, `beta: (C)`.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || groups == 0 || shape[1] % groups != 0 {
            return Err(self.shape_err("group_norm", &[x, gamma, beta]));
        }
        let ch = shape[1];
        if self.shape(gamma) != [ch] || self.shape(beta) != [ch] {
            return Err(self.shape_err("group_norm", &[x, gamma, beta]));
        }
        let (batch, _, inner) = split_bc(&shape);
        let per_group = ch / groups * inner;
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); xv.len()];
        let mut stats = Vec::with_capacity(batch * groups);
        for n in 0..batch {
            for g in 0..groups {
                let start = (n * groups + g) * per_group;
                let seg = &xv[start..start + per_group];
                let mean = seg.iter().map(|v| v.as_f64()).sum::<f64>() / per_group as f64;
                let var = seg.iter().map(|v| (v.as_f64() - mean).powi(2)).sum::<f64>() / per_group as f64;
                let rstd = 1.0 / (var + GROUP_NORM_EPS).sqrt();
                stats.push((mean, rstd));
                for (j, (&v, o)) in seg.iter().zip(&mut out[start..start + per_group]).enumerate() {
                    let c = g * (ch / groups) + j / inner;
                    let xhat = (v.as_f64() - mean) * rstd;
                    *o = T::from_f64(xhat * gv[c].as_f64() + bv[c].as_f64());
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        self.push(
            "group_norm",
            out,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            },
            &[x, gamma, beta],
        )
    }

    /// Backpropagates from a one-element `output`, storing `∂output/∂leaf` on
    /// every leaf that requires a gradient.
    ///
    /// The graph behind `output` is consumed: a second call with the same
    /// output returns [`TensorError::TapeConsumed`]. Backpropagating a different
    /// output of the same tape accumulates into the leaf gradients until
    /// [`Tape::zero_grad`].
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.consumed.contains(&output) {
            return Err(TensorError::TapeConsumed);
        }
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(TensorError::NotScalar(out.shape().to_vec()));
        }
        let seed = Tensor::full(out.shape(), T::one());
        let grads = self.sweep(output, seed)?;
        for (node, g) in self.nodes.iter_mut().zip(grads) {
            if let (Op::Leaf, true, Some(g)) = (&node.op, node.requires_grad, g) {
                let g = Tensor::new(node.value.shape().to_vec(), g)?;
                node.grad = Some(match node.grad.take() {
                    Some(mut prev) => {
                        prev.data_mut().iter_mut().zip(g.data()).for_each(|(p, &v)| *p = *p + v);
                        prev
                    }
                    None => g,
                });
            }
        }
        self.consumed.push(output);
        Ok(())
    }

    /// Clears every stored leaf gradient.
    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    /// Vector-Jacobian product `cotangentᵀ · ∂output/∂wrt` for each `wrt`
    /// without consuming the tape.
    pub fn vjp(&self, output: Var, cotangent: &Tensor<T>, wrt: &[Var]) -> Result<Vec<Tensor<T>>> {
        if self.consumed.contains(&output) {
            return Err(TensorError::TapeConsumed);
        }
        if cotangent.shape() != self.shape(output) {
            return Err(TensorError::Shape {
                op: "vjp",
                shapes: vec![self.shape(output).to_vec(), cotangent.shape().to_vec()],
            });
        }
        let mut grads = self.sweep(output, cotangent.clone())?;
        wrt.iter()
            .map(|&v| {
                let shape = self.shape(v).to_vec();
                match grads.get_mut(v.0).and_then(Option::take) {
                    Some(g) => Tensor::new(shape, g),
                    None => Ok(Tensor::zeros(&shape)),
                }
            })
            .collect()
    }

    fn sweep(&self, output: Var, seed: Tensor<T>) -> Result<Vec<Option<Vec<T>>>> {
        if output.0 >= self.nodes.len() {
            return Err(TensorError::UnknownVar(output.0));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(grads);
        }
        grads[output.0] = Some(seed.into_data());
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else {
                continue;
            };
            self.backprop_node(node, &dy, &mut grads);
            // leaves keep their gradient for the caller; interior grads are dropped
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
        f(slot);
    }

    fn backprop_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b, bc) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                let (outer, ch, inner) = split_bc(node.value.shape());
                self.accumulate(grads, *b, |g| match bc {
                    Broadcast::Full => add_into(g, dy),
                    Broadcast::Scalar => {
                        g[0] = g[0] + T::from_f64(dy.iter().map(|v| v.as_f64()).sum());
                    }
                    Broadcast::Channel | Broadcast::SampleChannel => {
                        for n in 0..outer {
                            for c in 0..ch {
                                let base = (n * ch + c) * inner;
                                let s: f64 = dy[base..base + inner].iter().map(|v| v.as_f64()).sum();
                                let j = if *bc == Broadcast::Channel { c } else { n * ch + c };
                                g[j] = g[j] + T::from_f64(s);
                            }
                        }
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dy));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g - d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &y) in g.iter_mut().zip(dy).zip(bv) {
                        *g = *g + d * y;
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        *g = *g + d * x;
                    }
                });
            }
            Op::ScalarMul(a, s) => {
                let k = T::from_f64(*s);
                self.accumulate(grads, *a, |g| g.iter_mut().zip(dy).for_each(|(g, &d)| *g = *g + d * k));
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |g| T::gemm(m, n, k, dy, false, bv, true, g, true));
                self.accumulate(grads, *b, |g| T::gemm(k, m, n, av, true, dy, false, g, true));
            }
            Op::Conv2d(x, w, p) => {
                let (win, batch, cout) = self.conv_window(*x, *w, *p).expect("validated in forward");
                let (rows, ncol) = (win.col_rows(), win.col_cols());
                let in_len = win.channels * win.height * win.width;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![T::zero(); rows * ncol];
                if self.requires_grad(*w) {
                    self.accumulate(grads, *w, |g| {
                        for b in 0..batch {
                            win.im2col(&xv[b * in_len..(b + 1) * in_len], &mut cols);
                            let dyb = &dy[b * cout * ncol..(b + 1) * cout * ncol];
                            T::gemm(cout, ncol, rows, dyb, false, &cols, true, g, true);
                        }
                    });
                }
                self.accumulate(grads, *x, |g| {
                    for b in 0..batch {
                        let dyb = &dy[b * cout * ncol..(b + 1) * cout * ncol];
                        T::gemm(rows, cout, ncol, wv, true, dyb, false, &mut cols, false);
                        win.col2im(&cols, &mut g[b * in_len..(b + 1) * in_len]);
                    }
                });
            }
            Op::ConvTranspose2d(x, w, stride, pad) => {
                let (win, batch) = self.transpose_window(*x, *w, *stride, *pad).expect("validated in forward");
                let cin = self.shape(*x)[1];
                let (rows, ncol) = (win.col_rows(), win.col_cols());
                let out_len = win.channels * win.height * win.width;
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let mut cols = vec![T::zero(); rows * ncol];
                let need_w = self.requires_grad(*w);
                let need_x = self.requires_grad(*x);
                for b in 0..batch {
                    win.im2col(&dy[b * out_len..(b + 1) * out_len], &mut cols);
                    if need_x {
                        self.accumulate(grads, *x, |g| {
                            T::gemm(cin, rows, ncol, wv, false, &cols, false, &mut g[b * cin * ncol..(b + 1) * cin * ncol], true)
                        });
                    }
                    if need_w {
                        self.accumulate(grads, *w, |g| {
                            T::gemm(cin, ncol, rows, &xv[b * cin * ncol..(b + 1) * cin * ncol], false, &cols, true, g, true)
                        });
                    }
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        if x > T::zero() {
                            *g = *g + d;
                        }
                    }
                });
            }
            Op::Silu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |g| {
                    for ((g, &d), &x) in g.iter_mut().zip(dy).zip(av) {
                        let s = T::one() / (T::one() + (-x).exp());
                        *g = *g + d * s * (T::one() + x * (T::one() - s));
                    }
                });
            }
            Op::Mean(a, keep) | Op::Sum(a, keep) => {
                let shape = self.shape(*a);
                let inner: usize = shape[*keep..].iter().product();
                let scale = if matches!(node.op, Op::Mean(..)) {
                    T::from_f64(1.0 / inner as f64)
                } else {
                    T::one()
                };
                self.accumulate(grads, *a, |g| {
                    for (chunk, &d) in g.chunks_mut(inner).zip(dy) {
                        chunk.iter_mut().for_each(|g| *g = *g + d * scale);
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |g| add_into(g, dy)),
            Op::Concat(parts, axis) => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accumulate(grads, p, |g| {
                        for o in 0..outer {
                            let src = &dy[o * row + offset..o * row + offset + chunk];
                            add_into(&mut g[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Embedding(table, indices) => {
                let d = self.shape(*table)[1];
                self.accumulate(grads, *table, |g| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut g[i * d..(i + 1) * d], &dy[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let c = *node.value.shape().last().expect("rank checked in forward");
                let yv = node.value.data();
                self.accumulate(grads, *a, |g| {
                    for ((g, d), y) in g.chunks_mut(c).zip(dy.chunks(c)).zip(yv.chunks(c)) {
                        let total: f64 = d.iter().map(|v| v.as_f64()).sum();
                        for ((g, &d), &y) in g.iter_mut().zip(d).zip(y) {
                            *g = *g + T::from_f64(d.as_f64() - y.as_f64().exp() * total);
                        }
                    }
                });
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let shape = self.shape(*x);
                let ch = shape[1];
                let (batch, _, inner) = split_bc(shape);
                let cpg = ch / groups;
                let per_group = cpg * inner;
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let xhat = |idx: usize, s: (f64, f64)| (xv[idx].as_f64() - s.0) * s.1;

                self.accumulate(grads, *beta, |g| {
                    for n in 0..batch {
                        for c in 0..ch {
                            let base = (n * ch + c) * inner;
                            let s: f64 = dy[base..base + inner].iter().map(|v| v.as_f64()).sum();
                            g[c] = g[c] + T::from_f64(s);
                        }
                    }
                });
                self.accumulate(grads, *gamma, |g| {
                    for n in 0..batch {
                        for c in 0..ch {
                            let st = stats[n * groups + c / cpg];
                            let base = (n * ch + c) * inner;
                            let s: f64 = (base..base + inner).map(|i| dy[i].as_f64() * xhat(i, st)).sum();
                            g[c] = g[c] + T::from_f64(s);
                        }
                    }
                });
                self.accumulate(grads, *x, |g| {
                    let m = per_group as f64;
                    for n in 0..batch {
                        for grp in 0..*groups {
                            let st = stats[n * groups + grp];
                            let start = (n * groups + grp) * per_group;
                            let dxhat = |i: usize| dy[i].as_f64() * gv[grp * cpg + (i - start) / inner].as_f64();
                            let (mut s1, mut s2) = (0.0, 0.0);
                            for i in start..start + per_group {
                                let d = dxhat(i);
                                s1 += d;
                                s2 += d * xhat(i, st);
                            }
                            for i in start..start + per_group {
                                let v = st.1 / m * (m * dxhat(i) - s1 - xhat(i, st) * s2);
                                g[i] = g[i] + T::from_f64(v);
                            }
                        }
                    }
                });
            }
        }
    }
}

fn add_into<T: Element>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

/// Views a shape as `(leading, channels, trailing)` around axis 1.
fn split_bc(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        0 => (1, 1, 1),
        1 => (1, shape[0], 1),
        _ => (shape[0], shape[1], shape[2..].iter().product()),
    }
}
