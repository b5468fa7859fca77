//! Tape-based reverse-mode differentiation over tensor primitives.
//!
//! Ops append nodes to the [`Tape`] in execution order; node ids are handles
//! into that arena. [`Tape::backward`] consumes the tape, replays adjoints in
//! reverse op order, and returns gradients for every grad-enabled leaf.
//! Registration order is a topological order by construction, so one reverse
//! sweep suffices.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Id(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PadMode {
    /// Zero padding splitting evenly on both sides; output keeps spatial size
    /// at stride 1.
    Same,
    /// Zero padding of `(kh-1)*dilation` rows on the top/past side of the
    /// height axis only; width is same-padded. Output row `i` then depends on
    /// input rows `<= i`.
    CausalH,
}

#[derive(Debug, Clone, Copy)]
enum UnaryKind {
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Neg,
    Relu,
    Softplus,
    Abs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy)]
struct ConvSpec {
    cin: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
    stride: (usize, usize),
    dilation: (usize, usize),
    pad_top: usize,
    pad_left: usize,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Unary(UnaryKind, Id),
    Clamp { x: Id, lo: f64, hi: f64 },
    Binary(BinKind, Id, Id),
    /// Binary op between `a: [C, ...]` and a per-channel vector `v: [C]`
    /// broadcast over the trailing dims.
    BcastCh(BinKind, Id, Id),
    MulC(Id, f64),
    AddC(Id, f64),
    MatMul { a: Id, b: Id, m: usize, k: usize, n: usize },
    Conv { x: Id, kernel: Id, spec: ConvSpec },
    Concat { parts: Vec<Id>, axis: usize },
    Slice { x: Id, axis: usize, start: usize },
    /// `out[i] = x[map[i]]`; with a permutation map this is an exact reshuffle.
    Gather { x: Id, map: Arc<Vec<usize>> },
    Reshape(Id),
    SumAll(Id),
    SumLastAxis(Id),
    /// log |det W| of a square matrix, adjoint is `g * inv(W)^T`.
    LogAbsDet(Id),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients for grad-enabled leaves, keyed by leaf id.
#[derive(Debug, Default)]
pub struct GradMap {
    grads: HashMap<usize, Tensor>,
}

impl GradMap {
    pub fn get(&self, id: Id) -> Option<&Tensor> {
        self.grads.get(&id.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Ordered record of executed primitive ops. Confined to one session; not
/// shareable across threads by design (no interior mutability, `&mut` for
/// every op).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a tensor as a leaf; gradient participation follows
    /// `t.grad_enabled()`.
    pub fn leaf(&mut self, t: Tensor) -> Id {
        let needs = t.grad_enabled();
        self.push_unchecked(t, Op::Leaf, needs)
    }

    /// Registers a non-differentiable constant.
    pub fn constant(&mut self, t: Tensor) -> Id {
        self.push_unchecked(t, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Id {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, id: Id) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Clones the value out of the tape.
    pub fn detach(&self, id: Id) -> Tensor {
        let mut t = self.nodes[id.0].value.clone();
        t = t.map(|v| v); // drop grad flag on the copy
        t
    }

    fn needs(&self, id: Id) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Id {
        self.nodes.push(Node { value, op, needs_grad });
        Id(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool, what: &str) -> Result<Id> {
        if !value.data().iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite output of {what}")));
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    // ---- elementwise ----

    fn unary(&mut self, kind: UnaryKind, x: Id) -> Result<Id> {
        let xs = self.value(x);
        if matches!(kind, UnaryKind::Log) {
            if let Some(v) = xs.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::NumericDomain(format!("log of non-positive value {v}")));
            }
        }
        let out = xs.map(|v| match kind {
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Tanh => v.tanh(),
            UnaryKind::Sigmoid => 1.0 / (1.0 + (-v).exp()),
            UnaryKind::Neg => -v,
            UnaryKind::Relu => v.max(0.0),
            // stable: max(x,0) + ln(1 + e^{-|x|})
            UnaryKind::Softplus => v.max(0.0) + (-v.abs()).exp().ln_1p(),
            UnaryKind::Abs => v.abs(),
        });
        let needs = self.needs(x);
        self.push(out, Op::Unary(kind, x), needs, &format!("{kind:?}"))
    }

    pub fn exp(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Exp, x)
    }
    pub fn log(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Log, x)
    }
    pub fn tanh(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Tanh, x)
    }
    pub fn sigmoid(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Sigmoid, x)
    }
    pub fn neg(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Neg, x)
    }
    pub fn relu(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Relu, x)
    }
    pub fn softplus(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Softplus, x)
    }
    pub fn abs(&mut self, x: Id) -> Result<Id> {
        self.unary(UnaryKind::Abs, x)
    }

    pub fn clamp(&mut self, x: Id, lo: f64, hi: f64) -> Result<Id> {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let needs = self.needs(x);
        self.push(out, Op::Clamp { x, lo, hi }, needs, "clamp")
    }

    fn binary(&mut self, kind: BinKind, a: Id, b: Id) -> Result<Id> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            if kind == BinKind::Div {
                if tb.data().iter().any(|v| *v == 0.0) {
                    return Err(Error::NumericDomain("division by zero".into()));
                }
            }
            let data: Vec<f64> = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(x, y)| apply_bin(kind, *x, *y))
                .collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            let needs = self.needs(a) || self.needs(b);
            return self.push(out, Op::Binary(kind, a, b), needs, &format!("{kind:?}"));
        }
        // per-channel vector broadcast: b has shape [C] where C = a.shape[0]
        if tb.shape().len() == 1 && !ta.shape().is_empty() && tb.shape()[0] == ta.shape()[0] {
            if kind == BinKind::Div && tb.data().iter().any(|v| *v == 0.0) {
                return Err(Error::NumericDomain("division by zero".into()));
            }
            let c = ta.shape()[0];
            let m = ta.numel() / c;
            let mut data = Vec::with_capacity(ta.numel());
            for ch in 0..c {
                let v = tb.data()[ch];
                for x in &ta.data()[ch * m..(ch + 1) * m] {
                    data.push(apply_bin(kind, *x, v));
                }
            }
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            let needs = self.needs(a) || self.needs(b);
            return self.push(out, Op::BcastCh(kind, a, b), needs, &format!("{kind:?} bcast"));
        }
        Err(Error::Dimension(format!(
            "binary {kind:?} on shapes {:?} and {:?} (need equal shapes or per-channel vector)",
            ta.shape(),
            tb.shape()
        )))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(BinKind::Add, a, b)
    }
    pub fn sub(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(BinKind::Sub, a, b)
    }
    pub fn mul(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(BinKind::Mul, a, b)
    }
    pub fn div(&mut self, a: Id, b: Id) -> Result<Id> {
        self.binary(BinKind::Div, a, b)
    }

    pub fn mul_const(&mut self, x: Id, c: f64) -> Result<Id> {
        let out = self.value(x).map(|v| v * c);
        let needs = self.needs(x);
        self.push(out, Op::MulC(x, c), needs, "mul_const")
    }

    pub fn add_const(&mut self, x: Id, c: f64) -> Result<Id> {
        let out = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(out, Op::AddC(x, c), needs, "add_const")
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Id, b: Id) -> Result<Id> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension(format!(
                "matmul on shapes {sa:?} and {sb:?}"
            )));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let out = Tensor::new(vec![m, n], data)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, m, k, n }, needs, "matmul")
    }

    /// 2D cross-correlation of `x: [C_in, H, W]` with `kernel:
    /// [C_out, C_in, kh, kw]`. Odd kernel spatial size required.
    pub fn conv2d(
        &mut self,
        x: Id,
        kernel: Id,
        stride: (usize, usize),
        dilation: (usize, usize),
        pad: PadMode,
    ) -> Result<Id> {
        let (tx, tk) = (self.value(x), self.value(kernel));
        let (sx, sk) = (tx.shape(), tk.shape());
        if sx.len() != 3 || sk.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d expects x [C,H,W] and kernel [Co,Ci,kh,kw], got {sx:?} and {sk:?}"
            )));
        }
        if sk[1] != sx[0] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input {} vs kernel {}",
                sx[0], sk[1]
            )));
        }
        if sk[2] % 2 == 0 || sk[3] % 2 == 0 {
            return Err(Error::Dimension(format!(
                "kernel spatial size must be odd, got {}x{}",
                sk[2], sk[3]
            )));
        }
        if stride.0 == 0 || stride.1 == 0 || dilation.0 == 0 || dilation.1 == 0 {
            return Err(Error::Dimension("stride/dilation must be positive".into()));
        }
        let (cin, h, w) = (sx[0], sx[1], sx[2]);
        let (cout, kh, kw) = (sk[0], sk[2], sk[3]);
        let (dh, dw) = dilation;
        let span_h = (kh - 1) * dh;
        let span_w = (kw - 1) * dw;
        let (pad_top, pad_bottom) = match pad {
            PadMode::Same => (span_h / 2, span_h - span_h / 2),
            PadMode::CausalH => (span_h, 0),
        };
        let pad_left = span_w / 2;
        let pad_right = span_w - pad_left;
        let out_h = (h + pad_top + pad_bottom - span_h - 1) / stride.0 + 1;
        let out_w = (w + pad_left + pad_right - span_w - 1) / stride.1 + 1;
        let spec = ConvSpec {
            cin,
            cout,
            kh,
            kw,
            h,
            w,
            out_h,
            out_w,
            stride,
            dilation,
            pad_top,
            pad_left,
        };
        let data = conv_forward(tx.data(), tk.data(), &spec);
        let out = Tensor::new(vec![cout, out_h, out_w], data)?;
        let needs = self.needs(x) || self.needs(kernel);
        self.push(out, Op::Conv { x, kernel, spec }, needs, "conv2d")
    }

    /// 1D convolution over `x: [C_in, L]` with `kernel: [C_out, C_in, k]`,
    /// expressed through the 2D kernel with unit width.
    pub fn conv1d(
        &mut self,
        x: Id,
        kernel: Id,
        stride: usize,
        dilation: usize,
        pad: PadMode,
    ) -> Result<Id> {
        let sx = self.value(x).shape().to_vec();
        let sk = self.value(kernel).shape().to_vec();
        if sx.len() != 2 || sk.len() != 3 {
            return Err(Error::Dimension(format!(
                "conv1d expects x [C,L] and kernel [Co,Ci,k], got {sx:?} and {sk:?}"
            )));
        }
        let x3 = self.reshape(x, vec![sx[0], sx[1], 1])?;
        let k4 = self.reshape(kernel, vec![sk[0], sk[1], sk[2], 1])?;
        let y = self.conv2d(x3, k4, (stride, 1), (dilation, 1), pad)?;
        let sy = self.value(y).shape().to_vec();
        self.reshape(y, vec![sy[0], sy[1]])
    }

    pub fn log_abs_det(&mut self, w: Id) -> Result<Id> {
        let tw = self.value(w);
        let s = tw.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Dimension(format!("log_abs_det on shape {s:?}")));
        }
        let (det_sign, logdet) = lu_log_abs_det(tw.data(), s[0])?;
        if det_sign == 0.0 {
            return Err(Error::Invertibility("singular matrix in log_abs_det".into()));
        }
        let needs = self.needs(w);
        self.push(Tensor::scalar(logdet), Op::LogAbsDet(w), needs, "log_abs_det")
    }

    // ---- structure ----

    pub fn concat(&mut self, parts: &[Id], axis: usize) -> Result<Id> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat of zero parts".into()));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() {
                return Err(Error::Dimension("concat rank mismatch".into()));
            }
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis && a != b {
                    return Err(Error::Dimension(format!(
                        "concat non-axis dim {d} mismatch: {a} vs {b}"
                    )));
                }
            }
            axis_total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = vec![0.0; out_shape.iter().product()];
        let row_out = axis_total * inner;
        let mut offset = 0;
        for &p in parts {
            let t = self.value(p);
            let ax = t.shape()[axis];
            let row_in = ax * inner;
            for o in 0..outer {
                let src = &t.data()[o * row_in..(o + 1) * row_in];
                let dst_start = o * row_out + offset * inner;
                data[dst_start..dst_start + row_in].copy_from_slice(src);
            }
            offset += ax;
        }
        let out = Tensor::new(out_shape, data)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::Concat { parts: parts.to_vec(), axis }, needs, "concat")
    }

    pub fn slice(&mut self, x: Id, axis: usize, start: usize, len: usize) -> Result<Id> {
        let t = self.value(x);
        let s = t.shape().to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(Error::Dimension(format!(
                "slice [{start}, {start}+{len}) on axis {axis} of shape {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let mut out_shape = s.clone();
        out_shape[axis] = len;
        let mut data = vec![0.0; outer * len * inner];
        for o in 0..outer {
            let src_start = (o * s[axis] + start) * inner;
            let dst_start = o * len * inner;
            data[dst_start..dst_start + len * inner]
                .copy_from_slice(&t.data()[src_start..src_start + len * inner]);
        }
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        self.push(out, Op::Slice { x, axis, start }, needs, "slice")
    }

    /// Splits along `axis` into parts of the given sizes; sizes must sum to
    /// the axis length. `split(concat(parts)) == parts` exactly.
    pub fn split(&mut self, x: Id, axis: usize, sizes: &[usize]) -> Result<Vec<Id>> {
        let axis_len = {
            let s = self.value(x).shape();
            if axis >= s.len() {
                return Err(Error::Dimension(format!(
                    "split axis {axis} out of range for shape {s:?}"
                )));
            }
            s[axis]
        };
        if sizes.iter().sum::<usize>() != axis_len {
            return Err(Error::Dimension(format!(
                "split sizes {sizes:?} do not sum to axis length {axis_len}"
            )));
        }
        let mut out = Vec::with_capacity(sizes.len());
        let mut start = 0;
        for &len in sizes {
            out.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(out)
    }

    /// `out[i] = x[map[i]]`. The map is fixed data, so gradients scatter-add
    /// back through it.
    pub fn gather(&mut self, x: Id, map: Arc<Vec<usize>>, out_shape: Vec<usize>) -> Result<Id> {
        let t = self.value(x);
        let n = t.numel();
        if map.iter().any(|&i| i >= n) {
            return Err(Error::Dimension("gather index out of range".into()));
        }
        if map.len() != out_shape.iter().product::<usize>() {
            return Err(Error::Dimension("gather map length != out shape".into()));
        }
        let data: Vec<f64> = map.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        self.push(out, Op::Gather { x, map }, needs, "gather")
    }

    /// Transpose of a 2D tensor (a gather by the transposed index map).
    pub fn transpose2d(&mut self, x: Id) -> Result<Id> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension(format!("transpose2d on shape {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let map: Vec<usize> = (0..c * r).map(|i| (i % r) * c + i / r).collect();
        self.gather(x, Arc::new(map), vec![c, r])
    }

    pub fn reshape(&mut self, x: Id, shape: Vec<usize>) -> Result<Id> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {shape:?}",
                t.shape()
            )));
        }
        let out = Tensor::new(shape, t.data().to_vec())?;
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs, "reshape")
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, x: Id) -> Result<Id> {
        let s: f64 = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs, "sum_all")
    }

    /// Sums over the last axis: `[..., n] -> [...]` (rank-1 input yields a
    /// scalar).
    pub fn sum_last_axis(&mut self, x: Id) -> Result<Id> {
        let t = self.value(x);
        let s = t.shape();
        let n = *s.last().ok_or_else(|| Error::Dimension("sum_last_axis on rank-0".into()))?;
        let outer = t.numel() / n;
        let mut data = vec![0.0; outer];
        for (o, chunk) in t.data().chunks_exact(n).enumerate() {
            data[o] = chunk.iter().sum();
        }
        let out_shape = if s.len() == 1 { vec![1] } else { s[..s.len() - 1].to_vec() };
        let out = Tensor::new(out_shape, data)?;
        let needs = self.needs(x);
        self.push(out, Op::SumLastAxis(x), needs, "sum_last_axis")
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Consumes the tape and returns
    /// gradients for every grad-enabled leaf that the loss depends on.
    pub fn backward(mut self, loss: Id) -> Result<GradMap> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.needs(loss) {
            return Err(Error::Contract(
                "loss does not depend on any grad-enabled leaf".into(),
            ));
        }
        let mut adjoints: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoints[loss.0] = Some(vec![1.0]);
        let mut grads = HashMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(g) = adjoints[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            // Split borrow: clone the op descriptor (cheap), read values by id.
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    let t = &self.nodes[idx].value;
                    if t.grad_enabled() {
                        grads.insert(idx, Tensor::new(t.shape().to_vec(), g).expect("grad shape"));
                    }
                }
                Op::Unary(kind, x) => {
                    let xv = self.nodes[x.0].value.data();
                    let yv = self.nodes[idx].value.data();
                    let gx = self.adjoint_mut(&mut adjoints, x);
                    match kind {
                        UnaryKind::Exp => accum(gx, &g, |i, gi| gi * yv[i]),
                        UnaryKind::Log => accum(gx, &g, |i, gi| gi / xv[i]),
                        UnaryKind::Tanh => accum(gx, &g, |i, gi| gi * (1.0 - yv[i] * yv[i])),
                        UnaryKind::Sigmoid => {
                            accum(gx, &g, |i, gi| gi * yv[i] * (1.0 - yv[i]))
                        }
                        UnaryKind::Neg => accum(gx, &g, |_, gi| -gi),
                        UnaryKind::Relu => {
                            accum(gx, &g, |i, gi| if xv[i] > 0.0 { gi } else { 0.0 })
                        }
                        UnaryKind::Softplus => {
                            accum(gx, &g, |i, gi| gi / (1.0 + (-xv[i]).exp()))
                        }
                        UnaryKind::Abs => accum(gx, &g, |i, gi| gi * xv[i].signum() * if xv[i] == 0.0 { 0.0 } else { 1.0 }),
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = self.nodes[x.0].value.data();
                    let gx = self.adjoint_mut(&mut adjoints, x);
                    accum(gx, &g, |i, gi| if xv[i] >= lo && xv[i] <= hi { gi } else { 0.0 });
                }
                Op::Binary(kind, a, b) => {
                    match kind {
                        BinKind::Add => {
                            if self.nodes[a.0].needs_grad {
                                accum(self.adjoint_mut(&mut adjoints, a), &g, |_, gi| gi);
                            }
                            if self.nodes[b.0].needs_grad {
                                accum(self.adjoint_mut(&mut adjoints, b), &g, |_, gi| gi);
                            }
                        }
                        BinKind::Sub => {
                            if self.nodes[a.0].needs_grad {
                                accum(self.adjoint_mut(&mut adjoints, a), &g, |_, gi| gi);
                            }
                            if self.nodes[b.0].needs_grad {
                                accum(self.adjoint_mut(&mut adjoints, b), &g, |_, gi| -gi);
                            }
                        }
                        BinKind::Mul => {
                            if self.nodes[a.0].needs_grad {
                                let bv = self.nodes[b.0].value.data().to_vec();
                                accum(self.adjoint_mut(&mut adjoints, a), &g, |i, gi| gi * bv[i]);
                            }
                            if self.nodes[b.0].needs_grad {
                                let av = self.nodes[a.0].value.data().to_vec();
                                accum(self.adjoint_mut(&mut adjoints, b), &g, |i, gi| gi * av[i]);
                            }
                        }
                        BinKind::Div => {
                            let bv = self.nodes[b.0].value.data().to_vec();
                            if self.nodes[a.0].needs_grad {
                                accum(self.adjoint_mut(&mut adjoints, a), &g, |i, gi| gi / bv[i]);
                            }
                            if self.nodes[b.0].needs_grad {
                                let av = self.nodes[a.0].value.data().to_vec();
                                accum(self.adjoint_mut(&mut adjoints, b), &g, |i, gi| {
                                    -gi * av[i] / (bv[i] * bv[i])
                                });
                            }
                        }
                    }
                }
                Op::BcastCh(kind, a, b) => {
                    let c = self.nodes[b.0].value.numel();
                    let m = self.nodes[a.0].value.numel() / c;
                    let bv = self.nodes[b.0].value.data().to_vec();
                    if self.nodes[a.0].needs_grad {
                        let ga = self.adjoint_mut(&mut adjoints, a);
                        for ch in 0..c {
                            let v = bv[ch];
                            for i in 0..m {
                                let gi = g[ch * m + i];
                                ga[ch * m + i] += match kind {
                                    BinKind::Add => gi,
                                    BinKind::Sub => gi,
                                    BinKind::Mul => gi * v,
                                    BinKind::Div => gi / v,
                                };
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        let av = self.nodes[a.0].value.data().to_vec();
                        let gb = self.adjoint_mut(&mut adjoints, b);
                        for ch in 0..c {
                            let v = bv[ch];
                            let mut acc = 0.0;
                            for i in 0..m {
                                let gi = g[ch * m + i];
                                acc += match kind {
                                    BinKind::Add => gi,
                                    BinKind::Sub => -gi,
                                    BinKind::Mul => gi * av[ch * m + i],
                                    BinKind::Div => -gi * av[ch * m + i] / (v * v),
                                };
                            }
                            gb[ch] += acc;
                        }
                    }
                }
                Op::MulC(x, cst) => {
                    if self.nodes[x.0].needs_grad {
                        accum(self.adjoint_mut(&mut adjoints, x), &g, |_, gi| gi * cst);
                    }
                }
                Op::AddC(x, _) => {
                    if self.nodes[x.0].needs_grad {
                        accum(self.adjoint_mut(&mut adjoints, x), &g, |_, gi| gi);
                    }
                }
                Op::MatMul { a, b, m, k, n } => {
                    if self.nodes[a.0].needs_grad {
                        // dA = g (m x n) * B^T (n x k)
                        let bv = self.nodes[b.0].value.data().to_vec();
                        let ga = self.adjoint_mut(&mut adjoints, a);
                        for i in 0..m {
                            for j in 0..n {
                                let gi = g[i * n + j];
                                if gi == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    ga[i * k + p] += gi * bv[p * n + j];
                                }
                            }
                        }
                    }
                    if self.nodes[b.0].needs_grad {
                        // dB = A^T (k x m) * g (m x n)
                        let av = self.nodes[a.0].value.data().to_vec();
                        let gb = self.adjoint_mut(&mut adjoints, b);
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    gb[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::Conv { x, kernel, spec } => {
                    let xv = self.nodes[x.0].value.data().to_vec();
                    let kv = self.nodes[kernel.0].value.data().to_vec();
                    if self.nodes[x.0].needs_grad {
                        let gx = self.adjoint_mut(&mut adjoints, x);
                        conv_backward_input(gx, &kv, &g, &spec);
                    }
                    if self.nodes[kernel.0].needs_grad {
                        let gk = self.adjoint_mut(&mut adjoints, kernel);
                        conv_backward_kernel(gk, &xv, &g, &spec);
                    }
                }
                Op::Concat { parts, axis } => {
                    let out_shape = self.nodes[idx].value.shape().to_vec();
                    let outer: usize = out_shape[..axis].iter().product();
                    let inner: usize = out_shape[axis + 1..].iter().product();
                    let row_out = out_shape[axis] * inner;
                    let mut offset = 0;
                    for &p in &parts {
                        let ax = self.nodes[p.0].value.shape()[axis];
                        if self.nodes[p.0].needs_grad {
                            let row_in = ax * inner;
                            let gp = self.adjoint_mut(&mut adjoints, p);
                            for o in 0..outer {
                                let src = o * row_out + offset * inner;
                                let dst = o * row_in;
                                for i in 0..row_in {
                                    gp[dst + i] += g[src + i];
                                }
                            }
                        }
                        offset += ax;
                    }
                }
                Op::Slice { x, axis, start } => {
                    if self.nodes[x.0].needs_grad {
                        let in_shape = self.nodes[x.0].value.shape().to_vec();
                        let out_shape = self.nodes[idx].value.shape().to_vec();
                        let outer: usize = in_shape[..axis].iter().product();
                        let inner: usize = in_shape[axis + 1..].iter().product();
                        let len = out_shape[axis];
                        let gx = self.adjoint_mut(&mut adjoints, x);
                        for o in 0..outer {
                            let dst = (o * in_shape[axis] + start) * inner;
                            let src = o * len * inner;
                            for i in 0..len * inner {
                                gx[dst + i] += g[src + i];
                            }
                        }
                    }
                }
                Op::Gather { x, map } => {
                    if self.nodes[x.0].needs_grad {
                        let gx = self.adjoint_mut(&mut adjoints, x);
                        for (i, &src) in map.iter().enumerate() {
                            gx[src] += g[i];
                        }
                    }
                }
                Op::Reshape(x) => {
                    if self.nodes[x.0].needs_grad {
                        accum(self.adjoint_mut(&mut adjoints, x), &g, |_, gi| gi);
                    }
                }
                Op::SumAll(x) => {
                    if self.nodes[x.0].needs_grad {
                        let gx = self.adjoint_mut(&mut adjoints, x);
                        for v in gx.iter_mut() {
                            *v += g[0];
                        }
                    }
                }
                Op::SumLastAxis(x) => {
                    if self.nodes[x.0].needs_grad {
                        let n = *self.nodes[x.0].value.shape().last().unwrap();
                        let gx = self.adjoint_mut(&mut adjoints, x);
                        for (o, go) in g.iter().enumerate() {
                            for j in 0..n {
                                gx[o * n + j] += go;
                            }
                        }
                    }
                }
                Op::LogAbsDet(w) => {
                    if self.nodes[w.0].needs_grad {
                        let n = self.nodes[w.0].value.shape()[0];
                        let inv = lu_invert(self.nodes[w.0].value.data(), n)
                            .expect("matrix was invertible in forward pass");
                        let gw = self.adjoint_mut(&mut adjoints, w);
                        for i in 0..n {
                            for j in 0..n {
                                // d log|det W| / dW_ij = (W^{-1})_ji
                                gw[i * n + j] += g[0] * inv[j * n + i];
                            }
                        }
                    }
                }
            }
        }
        // Tape is consumed; clear explicitly so a reuse-after-backward is loud.
        self.nodes.clear();
        Ok(GradMap { grads })
    }

    fn adjoint_mut<'a>(
        &self,
        adjoints: &'a mut [Option<Vec<f64>>],
        id: Id,
    ) -> &'a mut Vec<f64> {
        let slot = &mut adjoints[id.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[id.0].value.numel()]);
        }
        slot.as_mut().unwrap()
    }
}

fn apply_bin(kind: BinKind, x: f64, y: f64) -> f64 {
    match kind {
        BinKind::Add => x + y,
        BinKind::Sub => x - y,
        BinKind::Mul => x * y,
        BinKind::Div => x / y,
    }
}

fn accum(dst: &mut [f64], g: &[f64], f: impl Fn(usize, f64) -> f64) {
    for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
        *d += f(i, gi);
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += aip * bv;
            }
        }
    }
    c
}

/// Valid output range `[lo, hi)` along one spatial dim for a fixed kernel tap:
/// positions where `o*stride + tap_offset` lands inside `[0, size)`.
fn valid_range(out_size: usize, size: usize, stride: usize, tap_offset: isize) -> (usize, usize) {
    // o*stride + tap_offset >= 0  =>  o >= ceil(-tap_offset / stride)
    let lo = if tap_offset >= 0 {
        0
    } else {
        ((-tap_offset) as usize).div_ceil(stride)
    };
    // o*stride + tap_offset <= size-1  =>  o <= (size-1 - tap_offset) / stride
    let hi_inc = size as isize - 1 - tap_offset;
    if hi_inc < 0 {
        return (0, 0);
    }
    let hi = (hi_inc as usize) / stride + 1;
    (lo.min(out_size), hi.min(out_size))
}

fn conv_forward(x: &[f64], k: &[f64], s: &ConvSpec) -> Vec<f64> {
    let mut out = vec![0.0; s.cout * s.out_h * s.out_w];
    let (sh, sw) = s.stride;
    let (dh, dw) = s.dilation;
    for co in 0..s.cout {
        let out_c = &mut out[co * s.out_h * s.out_w..(co + 1) * s.out_h * s.out_w];
        for ci in 0..s.cin {
            let x_c = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for i in 0..s.kh {
                let off_h = (i * dh) as isize - s.pad_top as isize;
                let (oh_lo, oh_hi) = valid_range(s.out_h, s.h, sh, off_h);
                for j in 0..s.kw {
                    let wgt = k[((co * s.cin + ci) * s.kh + i) * s.kw + j];
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_w = (j * dw) as isize - s.pad_left as isize;
                    let (ow_lo, ow_hi) = valid_range(s.out_w, s.w, sw, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = (oh * sh) as isize + off_h;
                        let xrow = (ih as usize) * s.w;
                        let orow = oh * s.out_w;
                        if sw == 1 {
                            let iw0 = (ow_lo as isize + off_w) as usize;
                            let src = &x_c[xrow + iw0..xrow + iw0 + (ow_hi - ow_lo)];
                            let dst = &mut out_c[orow + ow_lo..orow + ow_hi];
                            for (d, sv) in dst.iter_mut().zip(src) {
                                *d += wgt * sv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * sw) as isize + off_w) as usize;
                                out_c[orow + ow] += wgt * x_c[xrow + iw];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(gx: &mut [f64], k: &[f64], g: &[f64], s: &ConvSpec) {
    let (sh, sw) = s.stride;
    let (dh, dw) = s.dilation;
    for co in 0..s.cout {
        let g_c = &g[co * s.out_h * s.out_w..(co + 1) * s.out_h * s.out_w];
        for ci in 0..s.cin {
            let gx_c = &mut gx[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for i in 0..s.kh {
                let off_h = (i * dh) as isize - s.pad_top as isize;
                let (oh_lo, oh_hi) = valid_range(s.out_h, s.h, sh, off_h);
                for j in 0..s.kw {
                    let wgt = k[((co * s.cin + ci) * s.kh + i) * s.kw + j];
                    if wgt == 0.0 {
                        continue;
                    }
                    let off_w = (j * dw) as isize - s.pad_left as isize;
                    let (ow_lo, ow_hi) = valid_range(s.out_w, s.w, sw, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * sh) as isize + off_h) as usize;
                        let xrow = ih * s.w;
                        let orow = oh * s.out_w;
                        if sw == 1 {
                            let iw0 = (ow_lo as isize + off_w) as usize;
                            let dst = &mut gx_c[xrow + iw0..xrow + iw0 + (ow_hi - ow_lo)];
                            let src = &g_c[orow + ow_lo..orow + ow_hi];
                            for (d, gv) in dst.iter_mut().zip(src) {
                                *d += wgt * gv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * sw) as isize + off_w) as usize;
                                gx_c[xrow + iw] += wgt * g_c[orow + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_backward_kernel(gk: &mut [f64], x: &[f64], g: &[f64], s: &ConvSpec) {
    let (sh, sw) = s.stride;
    let (dh, dw) = s.dilation;
    for co in 0..s.cout {
        let g_c = &g[co * s.out_h * s.out_w..(co + 1) * s.out_h * s.out_w];
        for ci in 0..s.cin {
            let x_c = &x[ci * s.h * s.w..(ci + 1) * s.h * s.w];
            for i in 0..s.kh {
                let off_h = (i * dh) as isize - s.pad_top as isize;
                let (oh_lo, oh_hi) = valid_range(s.out_h, s.h, sh, off_h);
                for j in 0..s.kw {
                    let off_w = (j * dw) as isize - s.pad_left as isize;
                    let (ow_lo, ow_hi) = valid_range(s.out_w, s.w, sw, off_w);
                    if ow_lo >= ow_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oh in oh_lo..oh_hi {
                        let ih = ((oh * sh) as isize + off_h) as usize;
                        let xrow = ih * s.w;
                        let orow = oh * s.out_w;
                        if sw == 1 {
                            let iw0 = (ow_lo as isize + off_w) as usize;
                            let xs = &x_c[xrow + iw0..xrow + iw0 + (ow_hi - ow_lo)];
                            let gs = &g_c[orow + ow_lo..orow + ow_hi];
                            for (xv, gv) in xs.iter().zip(gs) {
                                acc += xv * gv;
                            }
                        } else {
                            for ow in ow_lo..ow_hi {
                                let iw = ((ow * sw) as isize + off_w) as usize;
                                acc += x_c[xrow + iw] * g_c[orow + ow];
                            }
                        }
                    }
                    gk[((co * s.cin + ci) * s.kh + i) * s.kw + j] += acc;
                }
            }
        }
    }
}

/// LU with partial pivoting; returns (sign of det, log |det|).
pub(crate) fn lu_log_abs_det(m: &[f64], n: usize) -> Result<(f64, f64)> {
    let mut a = m.to_vec();
    let mut sign = 1.0;
    let mut logdet = 0.0;
    for col in 0..n {
        // pivot
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-300 {
            return Ok((0.0, f64::NEG_INFINITY));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
            }
            sign = -sign;
        }
        let d = a[col * n + col];
        sign *= d.signum();
        logdet += d.abs().ln();
        for r in col + 1..n {
            let f = a[r * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[r * n + c] -= f * a[col * n + c];
            }
        }
    }
    Ok((sign, logdet))
}

/// Matrix inverse via Gauss-Jordan with partial pivoting (C <= 16 sizes).
pub(crate) fn lu_invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col * n + col].abs();
        for r in col + 1..n {
            let v = a[r * n + col].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best < 1e-12 {
            return Err(Error::Invertibility("singular matrix".into()));
        }
        if piv != col {
            for c in 0..n {
                a.swap(col * n + c, piv * n + c);
                inv.swap(col * n + c, piv * n + c);
            }
        }
        let d = a[col * n + col];
        for c in 0..n {
            a[col * n + c] /= d;
            inv[col * n + c] /= d;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[r * n + col];
            if f == 0.0 {
                continue;
            }
            for c in 0..n {
                a[r * n + c] -= f * a[col * n + c];
                inv[r * n + c] -= f * inv[col * n + c];
            }
        }
    }
    Ok(inv)
}

/// Solve W x = b for small square W.
pub(crate) fn lu_solve(w: &[f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    let inv = lu_invert(w, n)?;
    Ok(matmul_raw(&inv, b, n, n, 1))
}
