//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward op appends one node holding its output value. `backward`
//! walks the tape in reverse and accumulates gradients in place into each
//! parent's buffer, so slicing ops (per-step reads of a sequence) stay linear
//! in the sequence length.
//!
//! The tape also counts multiply-accumulates performed by matrix products and
//! convolutions, plus elementwise nonlinearity/normalization evaluations.
//! These counters back the analytic compute accounting.

use alloc::format;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::real::{gemm, Real};
use crate::tensor::Tensor;

const LAYER_NORM_EPS: f64 = 1e-5;
const L2_NORM_FLOOR: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation counters accumulated during forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OpCounters {
    pub macs: u64,
    pub elementwise: u64,
}

enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    AddBroadcast {
        x: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Relu(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    Reshape(Var),
    SliceLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Step {
        x: Var,
        t: usize,
    },
    Stack(Vec<Var>),
    SplitHeads {
        x: Var,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        heads: usize,
    },
    SoftmaxLast(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
    },
    MeanTokens(Var),
    L2Normalize(Var),
    /// `acts` caches `[i | f | g | o | tanh(c)]` per row for the backward pass.
    LstmCell {
        gates: Var,
        c_prev: Var,
        acts: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    counters: OpCounters,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(msg: alloc::string::String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            counters: OpCounters::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of `v` after [`Tape::backward`]; `None` if no gradient reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Fails with the layer name when `v` holds a NaN or infinity.
    pub fn ensure_finite(&self, v: Var, layer: &str) -> Result<()> {
        if self.value(v).all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { layer: layer.to_string() })
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// `y = x w^T + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x);
        let ws = self.value(w);
        if ws.shape().len() != 2 || xs.last_dim() != ws.shape()[1] {
            return shape_err(format!("linear: input {:?} vs weight {:?}", xs.shape(), ws.shape()));
        }
        let (out, inp) = (ws.shape()[0], ws.shape()[1]);
        let rows = xs.rows();
        let mut y = vec![T::zero(); rows * out];
        gemm(rows, inp, out, xs.data(), false, ws.data(), true, &mut y, false);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.len() != out {
                return shape_err(format!("linear: bias {:?} for width {}", bias.shape(), out));
            }
            for row in y.chunks_mut(out) {
                for (yv, bv) in row.iter_mut().zip(bias.data()) {
                    *yv = *yv + *bv;
                }
            }
        }
        let mut shape = xs.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        self.counters.macs += (rows * inp * out) as u64;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::Linear { x, w, b }, rg))
    }

    /// Batched `a @ b` (or `a @ b^T`) over 3-D tensors `[batch, m, k]`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 3 || bv.shape().len() != 3 || av.shape()[0] != bv.shape()[0] {
            return shape_err(format!("bmm: {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (kb, n) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if kb != k {
            return shape_err(format!("bmm: inner {} vs {}", k, kb));
        }
        let mut out = vec![T::zero(); bt * m * n];
        for i in 0..bt {
            gemm(
                m,
                k,
                n,
                &av.data()[i * m * k..],
                false,
                &bv.data()[i * k * n..],
                trans_b,
                &mut out[i * m * n..],
                false,
            );
        }
        self.counters.macs += (bt * m * k * n) as u64;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[bt, m, n], out)?, Op::BatchMatMul { a, b, trans_b }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("add: {:?} vs {:?}", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| *x + *y).collect();
        let t = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    /// Adds `b` to every trailing block of `x` whose shape equals `b`'s.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let bs = bv.shape();
        let xs = xv.shape();
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return shape_err(format!("add_broadcast: {:?} + {:?}", xs, bs));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(bv.len()) {
            for (d, v) in chunk.iter_mut().zip(bv.data()) {
                *d = *d + *v;
            }
        }
        let t = Tensor::from_vec(xs, data)?;
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(t, Op::AddBroadcast { x, b }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| *v * factor).collect())?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Scale { x, factor }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let t = Tensor::from_vec(xv.shape(), xv.data().iter().map(|v| v.max(T::zero())).collect())?;
        self.counters.elementwise += t.len() as u64;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Relu(x), rg))
    }

    /// 1-D convolution: `x [B, C_in, L]`, `w [C_out, C_in, K]`, `b [C_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.shape().len() != 3 || wv.shape().len() != 3 || xv.shape()[1] != wv.shape()[1] {
            return shape_err(format!("conv1d: input {:?}, kernel {:?}", xv.shape(), wv.shape()));
        }
        let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (cout, k) = (wv.shape()[0], wv.shape()[2]);
        if stride == 0 || k > len {
            return shape_err(format!("conv1d: kernel {} stride {} on length {}", k, stride, len));
        }
        if self.value(b).len() != cout {
            return shape_err(format!("conv1d: bias for {} channels", cout));
        }
        let lout = (len - k) / stride + 1;
        let mut col = vec![T::zero(); cin * k * lout];
        let mut out = vec![T::zero(); batch * cout * lout];
        let bias = self.value(b).data();
        for bi in 0..batch {
            im2col(
                &xv.data()[bi * cin * len..(bi + 1) * cin * len],
                cin,
                len,
                k,
                stride,
                lout,
                &mut col,
            );
            let o = &mut out[bi * cout * lout..(bi + 1) * cout * lout];
            gemm(cout, cin * k, lout, wv.data(), false, &col, false, o, false);
            for (row, bv) in o.chunks_mut(lout).zip(bias) {
                row.iter_mut().for_each(|v| *v = *v + *bv);
            }
        }
        self.counters.macs += (batch * cout * lout * cin * k) as u64;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[batch, cout, lout], out)?, Op::Conv1d { x, w, b, stride }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Slice `[start, start + len)` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if start + len > d {
            return shape_err(format!("slice_last: {}..{} of {}", start, start + len, d));
        }
        let mut data = Vec::with_capacity(xv.rows() * len);
        for r in 0..xv.rows() {
            data.extend_from_slice(&xv.row(r)[start..start + len]);
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::SliceLast { x, start }, rg))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]);
        let rows = first.rows();
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let mut width = 0;
        for &p in parts {
            let pv = self.value(p);
            if pv.shape()[..pv.shape().len() - 1] != lead[..] {
                return shape_err(format!("concat_last: {:?} vs {:?}", pv.shape(), first.shape()));
            }
            width += pv.last_dim();
        }
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let mut shape = lead;
        shape.push(width);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::ConcatLast(parts.to_vec()), rg))
    }

    /// Time step `t` of a `[B, T, F]` sequence as `[B, F]`.
    pub fn step(&mut self, x: Var, t: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 || t >= xv.shape()[1] {
            return shape_err(format!("step {} of {:?}", t, xv.shape()));
        }
        let (b, steps, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut data = Vec::with_capacity(b * f);
        for bi in 0..b {
            let off = (bi * steps + t) * f;
            data.extend_from_slice(&xv.data()[off..off + f]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, f], data)?, Op::Step { x, t }, rg))
    }

    /// Stacks `[B, F]` steps into a `[B, T, F]` sequence.
    pub fn stack(&mut self, steps: &[Var]) -> Result<Var> {
        let first = self.value(steps[0]).shape().to_vec();
        if first.len() != 2 {
            return shape_err(format!("stack: step shape {:?}", first));
        }
        let (b, f) = (first[0], first[1]);
        let t = steps.len();
        let mut data = vec![T::zero(); b * t * f];
        for (ti, &s) in steps.iter().enumerate() {
            let sv = self.value(s);
            if sv.shape() != first.as_slice() {
                return shape_err(format!("stack: {:?} vs {:?}", sv.shape(), first));
            }
            for bi in 0..b {
                let off = (bi * t + ti) * f;
                data[off..off + f].copy_from_slice(sv.row(bi));
            }
        }
        let rg = steps.iter().any(|&s| self.rg(s));
        Ok(self.push(Tensor::from_vec(&[b, t, f], data)?, Op::Stack(steps.to_vec()), rg))
    }

    /// `[B, L, H*dh] -> [B*H, L, dh]`.
    pub fn split_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[2].is_multiple_of(heads) {
            return shape_err(format!("split_heads: {:?} into {} heads", s, heads));
        }
        let (b, l, d) = (s[0], s[1], s[2]);
        let dh = d / heads;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let src = (bi * l + li) * d + h * dh;
                    let dst = ((bi * heads + h) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b * heads, l, dh], out)?, Op::SplitHeads { x, heads }, rg))
    }

    /// `[B*H, L, dh] -> [B, L, H*dh]`.
    pub fn merge_heads(&mut self, x: Var, heads: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 3 || heads == 0 || !s[0].is_multiple_of(heads) {
            return shape_err(format!("merge_heads: {:?} from {} heads", s, heads));
        }
        let (bh, l, dh) = (s[0], s[1], s[2]);
        let b = bh / heads;
        let d = heads * dh;
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            for li in 0..l {
                for h in 0..heads {
                    let dst = (bi * l + li) * d + h * dh;
                    let src = ((bi * heads + h) * l + li) * dh;
                    out[dst..dst + dh].copy_from_slice(&xv.data()[src..src + dh]);
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, l, d], out)?, Op::MergeHeads { x, heads }, rg))
    }

    pub fn softmax_last(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        self.counters.elementwise += t.len() as u64;
        let rg = self.rg(x);
        Ok(self.push(t, Op::SoftmaxLast(x), rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        if g.len() != d || b.len() != d {
            return shape_err(format!("layer_norm: width {} with gain {}", d, g.len()));
        }
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let (mean, inv) = moments(row);
            for (j, v) in row.iter().enumerate() {
                out.push((*v - mean) * inv * g[j] + b[j]);
            }
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        self.counters.elementwise += t.len() as u64;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(t, Op::LayerNorm { x, gain, bias }, rg))
    }

    /// Mean over the token axis: `[B, L, D] -> [B, D]`.
    pub fn mean_tokens(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape().len() != 3 {
            return shape_err(format!("mean_tokens: {:?}", xv.shape()));
        }
        let (b, l, d) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let inv = T::one() / T::of(l as f64);
        let mut out = vec![T::zero(); b * d];
        for bi in 0..b {
            for li in 0..l {
                let row = &xv.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
                for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                    *o = *o + *v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_vec(&[b, d], out)?, Op::MeanTokens(x), rg))
    }

    /// Scales every row of the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(d) {
            let n = row_norm(row);
            row.iter_mut().for_each(|v| *v = *v / n);
        }
        let t = Tensor::from_vec(xv.shape(), out)?;
        self.counters.elementwise += t.len() as u64;
        let rg = self.rg(x);
        Ok(self.push(t, Op::L2Normalize(x), rg))
    }

    /// Fused LSTM cell. `gates [B, 4H]` holds pre-activations in
    /// input/forget/cell/output order; returns `[B, 2H]` = `[h | c]`.
    pub fn lstm_cell(&mut self, gates: Var, c_prev: Var) -> Result<Var> {
        let (gv, cv) = (self.value(gates), self.value(c_prev));
        let h = cv.last_dim();
        if gv.last_dim() != 4 * h || gv.rows() != cv.rows() {
            return shape_err(format!("lstm_cell: gates {:?}, state {:?}", gv.shape(), cv.shape()));
        }
        let b = cv.rows();
        let mut out = vec![T::zero(); b * 2 * h];
        let mut acts = vec![T::zero(); b * 5 * h];
        for ((g, c0), (o, a)) in gv
            .data()
            .chunks_exact(4 * h)
            .zip(cv.data().chunks_exact(h))
            .zip(out.chunks_exact_mut(2 * h).zip(acts.chunks_exact_mut(5 * h)))
        {
            for (x, y) in a[..4 * h].iter_mut().zip(g) {
                *x = *y;
            }
            let (ifg, rest) = a.split_at_mut(2 * h);
            ifg.iter_mut().for_each(|v| *v = sigmoid(*v));
            let (gg, rest) = rest.split_at_mut(h);
            gg.iter_mut().for_each(|v| *v = v.tanh());
            let (og, tc) = rest.split_at_mut(h);
            og.iter_mut().for_each(|v| *v = sigmoid(*v));
            let (ig, fg) = ifg.split_at(h);
            let (oh, oc) = o.split_at_mut(h);
            for j in 0..h {
                let c = fg[j] * c0[j] + ig[j] * gg[j];
                tc[j] = c.tanh();
                oh[j] = og[j] * tc[j];
                oc[j] = c;
            }
        }
        self.counters.elementwise += (b * 5 * h) as u64;
        let rg = self.rg(gates) || self.rg(c_prev);
        Ok(self.push(Tensor::from_vec(&[b, 2 * h], out)?, Op::LstmCell { gates, c_prev, acts }, rg))
    }

    /// Runs reverse-mode accumulation from the given output seeds.
    ///
    /// Gradients for leaves remain available through [`Tape::grad`].
    pub fn backward(&mut self, seeds: &[(Var, &[T])]) -> Result<()> {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return shape_err(format!(
                    "backward seed of length {} for node of size {}",
                    g.len(),
                    self.value(v).len()
                ));
            }
            let slot = acc_slot(&mut self.grads, &self.nodes, v);
            for (s, x) in slot.iter_mut().zip(g) {
                *s = *s + *x;
            }
        }
        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (xv, wv) = (val(*x), val(*w));
                let (out, inp) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.rows();
                if rg(*x) {
                    let dx = acc_slot(grads, nodes, *x);
                    gemm(rows, out, inp, g, false, wv.data(), false, dx, true);
                }
                if rg(*w) {
                    let dw = acc_slot(grads, nodes, *w);
                    gemm(out, rows, inp, g, true, xv.data(), false, dw, true);
                }
                if let Some(b) = b {
                    if rg(*b) {
                        let db = acc_slot(grads, nodes, *b);
                        for row in g.chunks(out) {
                            for (d, v) in db.iter_mut().zip(row) {
                                *d = *d + *v;
                            }
                        }
                    }
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (val(*a), val(*b));
                let (bt, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = nodes[i].value.shape()[2];
                if rg(*a) {
                    let da = acc_slot(grads, nodes, *a);
                    for t in 0..bt {
                        // da = g @ op(b)^T
                        gemm(
                            m,
                            n,
                            k,
                            &g[t * m * n..],
                            false,
                            &bv.data()[t * k * n..],
                            !*trans_b,
                            &mut da[t * m * k..],
                            true,
                        );
                    }
                }
                if rg(*b) {
                    let db = acc_slot(grads, nodes, *b);
                    for t in 0..bt {
                        if *trans_b {
                            // stored [n, k]: d = g^T @ a
                            gemm(
                                n,
                                m,
                                k,
                                &g[t * m * n..],
                                true,
                                &av.data()[t * m * k..],
                                false,
                                &mut db[t * k * n..],
                                true,
                            );
                        } else {
                            gemm(
                                k,
                                m,
                                n,
                                &av.data()[t * m * k..],
                                true,
                                &g[t * m * n..],
                                false,
                                &mut db[t * k * n..],
                                true,
                            );
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [*a, *b] {
                    if rg(p) {
                        add_into(acc_slot(grads, nodes, p), g);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if rg(*x) {
                    add_into(acc_slot(grads, nodes, *x), g);
                }
                if rg(*b) {
                    let db = acc_slot(grads, nodes, *b);
                    let n = db.len();
                    for chunk in g.chunks(n) {
                        add_into(db, chunk);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if rg(*x) {
                    let dx = acc_slot(grads, nodes, *x);
                    for (d, v) in dx.iter_mut().zip(g) {
                        *d = *d + *v * *factor;
                    }
                }
            }
            Op::Relu(x) => {
                if rg(*x) {
                    let y = nodes[i].value.data();
                    let dx = acc_slot(grads, nodes, *x);
                    for ((d, v), yv) in dx.iter_mut().zip(g).zip(y) {
                        if *yv > T::zero() {
                            *d = *d + *v;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, stride } => {
                let (xv, wv) = (val(*x), val(*w));
                let (batch, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (cout, k) = (wv.shape()[0], wv.shape()[2]);
                let lout = nodes[i].value.shape()[2];
                let mut col = vec![T::zero(); cin * k * lout];
                if rg(*w) {
                    for bi in 0..batch {
                        im2col(
                            &xv.data()[bi * cin * len..(bi + 1) * cin * len],
                            cin,
                            len,
                            k,
                            *stride,
                            lout,
                            &mut col,
                        );
                        let dw = acc_slot(grads, nodes, *w);
                        gemm(cout, lout, cin * k, &g[bi * cout * lout..], false, &col, true, dw, true);
                    }
                }
                if rg(*b) {
                    let db = acc_slot(grads, nodes, *b);
                    for bi in 0..batch {
                        for (c, d) in db.iter_mut().enumerate() {
                            let row = &g[(bi * cout + c) * lout..(bi * cout + c + 1) * lout];
                            *d = *d + row.iter().copied().sum::<T>();
                        }
                    }
                }
                if rg(*x) {
                    for bi in 0..batch {
                        gemm(cin * k, cout, lout, wv.data(), true, &g[bi * cout * lout..], false, &mut col, false);
                        let dx = acc_slot(grads, nodes, *x);
                        col2im_add(&col, cin, len, k, *stride, lout, &mut dx[bi * cin * len..(bi + 1) * cin * len]);
                    }
                }
            }
            Op::Reshape(x) => {
                if rg(*x) {
                    add_into(acc_slot(grads, nodes, *x), g);
                }
            }
            Op::SliceLast { x, start } => {
                if rg(*x) {
                    let d = val(*x).last_dim();
                    let len = nodes[i].value.last_dim();
                    let dx = acc_slot(grads, nodes, *x);
                    for (r, gr) in g.chunks(len).enumerate() {
                        add_into(&mut dx[r * d + start..r * d + start + len], gr);
                    }
                }
            }
            Op::ConcatLast(parts) => {
                let width = nodes[i].value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let d = val(p).last_dim();
                    if rg(p) {
                        let dp = acc_slot(grads, nodes, p);
                        for (r, gr) in g.chunks(width).enumerate() {
                            add_into(&mut dp[r * d..(r + 1) * d], &gr[off..off + d]);
                        }
                    }
                    off += d;
                }
            }
            Op::Step { x, t } => {
                if rg(*x) {
                    let s = val(*x).shape();
                    let (steps, f) = (s[1], s[2]);
                    let dx = acc_slot(grads, nodes, *x);
                    for (bi, gr) in g.chunks(f).enumerate() {
                        let off = (bi * steps + t) * f;
                        add_into(&mut dx[off..off + f], gr);
                    }
                }
            }
            Op::Stack(steps) => {
                let s = nodes[i].value.shape();
                let (b, t, f) = (s[0], s[1], s[2]);
                for (ti, &p) in steps.iter().enumerate() {
                    if rg(p) {
                        let dp = acc_slot(grads, nodes, p);
                        for bi in 0..b {
                            let off = (bi * t + ti) * f;
                            add_into(&mut dp[bi * f..(bi + 1) * f], &g[off..off + f]);
                        }
                    }
                }
            }
            Op::SplitHeads { x, heads } => {
                if rg(*x) {
                    let s = val(*x).shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let dh = d / heads;
                    let dx = acc_slot(grads, nodes, *x);
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let dst = (bi * l + li) * d + h * dh;
                                let src = ((bi * heads + h) * l + li) * dh;
                                add_into(&mut dx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::MergeHeads { x, heads } => {
                if rg(*x) {
                    let s = val(*x).shape();
                    let (bh, l, dh) = (s[0], s[1], s[2]);
                    let b = bh / heads;
                    let d = heads * dh;
                    let dx = acc_slot(grads, nodes, *x);
                    for bi in 0..b {
                        for li in 0..l {
                            for h in 0..*heads {
                                let src = (bi * l + li) * d + h * dh;
                                let dst = ((bi * heads + h) * l + li) * dh;
                                add_into(&mut dx[dst..dst + dh], &g[src..src + dh]);
                            }
                        }
                    }
                }
            }
            Op::SoftmaxLast(x) => {
                if rg(*x) {
                    let y = &nodes[i].value;
                    let d = y.last_dim();
                    let dx = acc_slot(grads, nodes, *x);
                    for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(y.data().chunks(d)) {
                        let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            dr[j] = dr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias } => {
                let xv = val(*x);
                let d = xv.last_dim();
                let gn = val(*gain).data().to_vec();
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dx_all = if rg(*x) { vec![T::zero(); xv.len()] } else { Vec::new() };
                let inv_d = T::one() / T::of(d as f64);
                let mut xhat = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for (r, (row, gr)) in xv.data().chunks(d).zip(g.chunks(d)).enumerate() {
                    let (mean, inv) = moments(row);
                    for j in 0..d {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = gr[j] * gn[j];
                        dgain[j] = dgain[j] + gr[j] * xhat[j];
                        dbias[j] = dbias[j] + gr[j];
                    }
                    if !dx_all.is_empty() {
                        let m1: T = dxhat.iter().copied().sum::<T>() * inv_d;
                        let m2: T = dxhat.iter().zip(&xhat).map(|(a, b)| *a * *b).sum::<T>() * inv_d;
                        for j in 0..d {
                            dx_all[r * d + j] = inv * (dxhat[j] - m1 - xhat[j] * m2);
                        }
                    }
                }
                if rg(*x) {
                    add_into(acc_slot(grads, nodes, *x), &dx_all);
                }
                if rg(*gain) {
                    add_into(acc_slot(grads, nodes, *gain), &dgain);
                }
                if rg(*bias) {
                    add_into(acc_slot(grads, nodes, *bias), &dbias);
                }
            }
            Op::MeanTokens(x) => {
                if rg(*x) {
                    let s = val(*x).shape();
                    let (b, l, d) = (s[0], s[1], s[2]);
                    let inv = T::one() / T::of(l as f64);
                    let dx = acc_slot(grads, nodes, *x);
                    for bi in 0..b {
                        let gr = &g[bi * d..(bi + 1) * d];
                        for li in 0..l {
                            let off = (bi * l + li) * d;
                            for (dv, gv) in dx[off..off + d].iter_mut().zip(gr) {
                                *dv = *dv + *gv * inv;
                            }
                        }
                    }
                }
            }
            Op::L2Normalize(x) => {
                if rg(*x) {
                    let xv = val(*x);
                    let y = nodes[i].value.data();
                    let d = xv.last_dim();
                    let dx = acc_slot(grads, nodes, *x);
                    for (r, row) in xv.data().chunks(d).enumerate() {
                        let n = row_norm(row);
                        let yr = &y[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                        for j in 0..d {
                            dx[r * d + j] = dx[r * d + j] + (gr[j] - yr[j] * dot) / n;
                        }
                    }
                }
            }
            Op::LstmCell { gates, c_prev, acts } => {
                let cv = val(*c_prev);
                let h = cv.last_dim();
                let b = cv.rows();
                let mut dgates = vec![T::zero(); b * 4 * h];
                let mut dc_prev = vec![T::zero(); b * h];
                let one = T::one();
                for (((a, c0), go), (dg, dcp)) in acts
                    .chunks_exact(5 * h)
                    .zip(cv.data().chunks_exact(h))
                    .zip(g.chunks_exact(2 * h))
                    .zip(dgates.chunks_exact_mut(4 * h).zip(dc_prev.chunks_exact_mut(h)))
                {
                    for j in 0..h {
                        let (ig, fg, cg, og, tc) = (a[j], a[h + j], a[2 * h + j], a[3 * h + j], a[4 * h + j]);
                        let dh = go[j];
                        let dc = go[h + j] + dh * og * (one - tc * tc);
                        dg[j] = dc * cg * ig * (one - ig);
                        dg[h + j] = dc * c0[j] * fg * (one - fg);
                        dg[2 * h + j] = dc * ig * (one - cg * cg);
                        dg[3 * h + j] = dh * tc * og * (one - og);
                        dcp[j] = dc * fg;
                    }
                }
                if rg(*gates) {
                    add_into(acc_slot(grads, nodes, *gates), &dgates);
                }
                if rg(*c_prev) {
                    add_into(acc_slot(grads, nodes, *c_prev), &dc_prev);
                }
            }
        }
    }
}

fn acc_slot<'a, T: Real>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn moments<T: Real>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt())
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|v| *v * *v).sum::<T>().sqrt().max(T::of(L2_NORM_FLOOR))
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s = s + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / s);
}

fn im2col<T: Real>(x: &[T], cin: usize, len: usize, k: usize, stride: usize, lout: usize, col: &mut [T]) {
    for c in 0..cin {
        for kk in 0..k {
            let dst = &mut col[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (l, d) in dst.iter_mut().enumerate() {
                *d = x[c * len + l * stride + kk];
            }
        }
    }
}

fn col2im_add<T: Real>(col: &[T], cin: usize, len: usize, k: usize, stride: usize, lout: usize, dx: &mut [T]) {
    for c in 0..cin {
        for kk in 0..k {
            let src = &col[(c * k + kk) * lout..(c * k + kk + 1) * lout];
            for (l, s) in src.iter().enumerate() {
                let idx = c * len + l * stride + kk;
                dx[idx] = dx[idx] + *s;
            }
        }
    }
}
