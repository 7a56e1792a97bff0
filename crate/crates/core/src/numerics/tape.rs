//! Reverse-mode differentiation over a Wengert list.
//!
//! Every operation appends a node holding its forward value; nodes only ever
//! refer to earlier nodes, so the list is already in topological order and the
//! backward pass is a single reverse sweep. Nodes whose inputs are all
//! constants are marked as not needing a gradient and are skipped entirely.

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var, f64),
    Abs(Var),
    Softmax(Var),
    Conv2d { x: Var, kernel: Var, bias: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    FramesFromChannels(Var),
    Row(Var, usize),
    Stack(Vec<Var>),
    Concat(Vec<Var>),
    ConcatCols(Var, Var),
    Slice(Var, usize),
    Sum(Var),
    SoftmaxCrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Confined to one thread; build one per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; zeros if `v` did not
    /// influence the loss.
    pub fn wrt(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape.clone(), g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Whether a gradient buffer was materialized for `v`.
    pub fn materialized(&self, v: Var) -> bool {
        self.grads[v.0].is_some()
    }

    pub fn take(&mut self, v: Var) -> Vec<f64> {
        let n: usize = self.shapes[v.0].iter().product();
        self.grads[v.0].take().unwrap_or_else(|| vec![0.0; n])
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `[C, H, W]` same-padded cross-correlation with `[Co, C, KH, KW]` kernels.
pub(crate) fn conv2d_forward(x: &Tensor, k: &Tensor, b: &Tensor) -> Vec<f64> {
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let xd = x.data();
    let kd = k.data();
    let mut out = vec![0.0; co_n * h * w];
    for co in 0..co_n {
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        plane.fill(b.data()[co]);
        for ci in 0..ci_n {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for kt in 0..kh {
                let dt = kt as isize - ph;
                let (t0, t1) = valid_range(dt, h);
                for kf in 0..kw {
                    let df = kf as isize - pw;
                    let (f0, f1) = valid_range(df, w);
                    let wv = kd[((co * ci_n + ci) * kh + kt) * kw + kf];
                    if wv == 0.0 {
                        continue;
                    }
                    for t in t0..t1 {
                        let src_t = (t as isize + dt) as usize;
                        let dst = &mut plane[t * w + f0..t * w + f1];
                        let src_start = (src_t * w) as isize + f0 as isize + df;
                        let src = &xin[src_start as usize..src_start as usize + (f1 - f0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Output positions `i` in `0..n` for which `i + offset` is inside `0..n`.
fn valid_range(offset: isize, n: usize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset.max(0)).max(0) as usize;
    (lo.min(n), hi.max(lo.min(n)))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-differentiable input. No gradient is ever materialized for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(mismatch("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a_ip = ad[i * k + p];
                if a_ip == 0.0 {
                    continue;
                }
                for (o, &bpj) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += a_ip * bpj;
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), ng))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<(Tensor, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av, bv));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data)?;
        Ok((t, self.ng(a) || self.ng(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), ng))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, ng) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Adds a length-`n` bias to every row of an `[m, n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if xv.rank() != 2 || bv.rank() != 1 || xv.shape()[1] != bv.shape()[0] {
            return Err(mismatch("add_bias", xv, bv));
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(n) {
            for (r, &b) in row.iter_mut().zip(bv.data()) {
                *r += b;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), data)?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, Op::AddBias(x, bias), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let ng = self.ng(x);
        self.push(t, Op::Scale(x, s), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let ng = self.ng(x);
        self.push(t, Op::Sigmoid(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let ng = self.ng(x);
        self.push(t, Op::Tanh(x), ng)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.ng(x);
        self.push(t, Op::LeakyRelu(x, slope), ng)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::abs);
        let ng = self.ng(x);
        self.push(t, Op::Abs(x), ng)
    }

    /// Softmax along the last axis (each row of a matrix, or a whole vector).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let n = *xv.shape().last().ok_or_else(|| Error::InvalidShape {
            shape: vec![],
            reason: "softmax of a scalar".into(),
        })?;
        let mut out = vec![0.0; xv.len()];
        for (row, o) in xv.data().chunks(n).zip(out.chunks_mut(n)) {
            softmax_into(row, o);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Softmax(x), ng))
    }

    /// Multi-channel 2-D cross-correlation with "same" zero padding.
    ///
    /// `x: [C_in, H, W]`, `kernel: [C_out, C_in, KH, KW]` with odd `KH`, `KW`,
    /// `bias: [C_out]`; output `[C_out, H, W]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let (xv, kv, bv) = (self.value(x), self.value(kernel), self.value(bias));
        if xv.rank() != 3 || kv.rank() != 4 || kv.shape()[1] != xv.shape()[0] {
            return Err(mismatch("conv2d", xv, kv));
        }
        if kv.shape()[2] % 2 == 0 || kv.shape()[3] % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: kv.shape().to_vec(),
                reason: "same padding needs odd kernel extents".into(),
            });
        }
        if bv.shape() != [kv.shape()[0]] {
            return Err(mismatch("conv2d bias", kv, bv));
        }
        let out = conv2d_forward(xv, kv, bv);
        let shape = vec![kv.shape()[0], xv.shape()[1], xv.shape()[2]];
        let ng = self.ng(x) || self.ng(kernel) || self.ng(bias);
        Ok(self.push(Tensor::new(shape, out)?, Op::Conv2d { x, kernel, bias }, ng))
    }

    /// Non-overlapping 2x2 max pooling over the last two axes of `[C, H, W]`.
    /// Odd trailing rows/columns are dropped; ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 || xv.shape()[1] < 2 || xv.shape()[2] < 2 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "maxpool2 needs [C, H>=2, W>=2]".into(),
            });
        }
        let (c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (ho, wo) = (h / 2, w / 2);
        let d = xv.data();
        let mut out = Vec::with_capacity(c * ho * wo);
        let mut argmax = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    let base = ch * h * w + 2 * i * w + 2 * j;
                    let mut best = base;
                    for idx in [base + 1, base + w, base + w + 1] {
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![c, ho, wo], out)?, Op::MaxPool2 { x, argmax }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(x);
        Ok(self.push(t, Op::Reshape(x), ng))
    }

    /// `[C, T, F] -> [T, C*F]`, keeping the time axis and laying channels out
    /// as contiguous blocks of `F` frequency bins.
    pub fn frames_from_channels(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: "expected [C, T, F]".into(),
            });
        }
        let (c, t, f) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let d = xv.data();
        let mut out = vec![0.0; c * t * f];
        for ch in 0..c {
            for ti in 0..t {
                out[ti * c * f + ch * f..ti * c * f + (ch + 1) * f]
                    .copy_from_slice(&d[(ch * t + ti) * f..(ch * t + ti + 1) * f]);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::new(vec![t, c * f], out)?, Op::FramesFromChannels(x), ng))
    }

    /// Row `i` of an `[m, n]` matrix as an `[n]` vector.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || i >= xv.shape()[0] {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("row {i} out of range"),
            });
        }
        let t = Tensor::vector(xv.row(i).to_vec());
        let ng = self.ng(x);
        Ok(self.push(t, Op::Row(x, i), ng))
    }

    /// Stacks equal-length vectors into the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or_else(|| Error::invalid("stack of nothing"))?;
        let n = self.value(*first).len();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            let rv = self.value(r);
            if rv.rank() != 1 || rv.len() != n {
                return Err(mismatch("stack", self.value(*first), rv));
            }
            data.extend_from_slice(rv.data());
        }
        let ng = rows.iter().any(|&r| self.ng(r));
        Ok(self.push(Tensor::new(vec![rows.len(), n], data)?, Op::Stack(rows.to_vec()), ng))
    }

    /// Concatenates vectors end to end.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of nothing"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.rank() != 1 {
                return Err(Error::InvalidShape {
                    shape: pv.shape().to_vec(),
                    reason: "concat expects vectors".into(),
                });
            }
            data.extend_from_slice(pv.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), ng))
    }

    /// `[T, p] ++ [T, q] -> [T, p+q]`.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[0] != bv.shape()[0] {
            return Err(mismatch("concat_cols", av, bv));
        }
        let (t, p, q) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut data = Vec::with_capacity(t * (p + q));
        for i in 0..t {
            data.extend_from_slice(av.row(i));
            data.extend_from_slice(bv.row(i));
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![t, p + q], data)?, Op::ConcatCols(a, b), ng))
    }

    /// `x[start..start+len]` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 1 || len == 0 || start + len > xv.len() {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("slice {start}..{} out of range", start + len),
            });
        }
        let t = Tensor::vector(xv.data()[start..start + len].to_vec());
        let ng = self.ng(x);
        Ok(self.push(t, Op::Slice(x, start), ng))
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    /// Mean negative log-likelihood of `targets` under `softmax(logits)`.
    ///
    /// `logits` is `[N, C]` (or `[C]` for a single sample). The gradient with
    /// respect to the logits is `(softmax - onehot) / N`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let c = *lv.shape().last().unwrap_or(&1);
        let n = lv.len() / c;
        if lv.rank() == 0 || targets.len() != n {
            return Err(Error::invalid(format!(
                "cross entropy over logits {:?} with {} targets",
                lv.shape(),
                targets.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::invalid(format!("target index {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (i, (row, p)) in lv.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            softmax_into(row, p);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[i]];
        }
        loss /= n as f64;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let shapes: Vec<Vec<usize>> = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        // Gradient buffers are moved out while an op accumulates into them and
        // put back afterwards, so an op that uses the same input twice simply
        // accumulates twice.
        macro_rules! with_grad {
            ($v:expr, $d:ident => $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let mut owned = grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
                    {
                        let $d: &mut Vec<f64> = &mut owned;
                        $body
                    }
                    put_back(grads, v, owned);
                }
            }};
        }

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                with_grad!(*a, da => {
                    let bd = bv.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] += gi.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                });
                with_grad!(*b, db => {
                    let ad = av.data();
                    for i in 0..m {
                        let gi = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = ad[i * k + p];
                            if a_ip == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(gi) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                with_grad!(*a, da => {
                    add_into(da, g);
                });
                with_grad!(*b, db => {
                    add_into(db, g);
                });
            }
            Op::Sub(a, b) => {
                with_grad!(*a, da => {
                    add_into(da, g);
                });
                with_grad!(*b, db => {
                    for (d, gv) in db.iter_mut().zip(g) {
                        *d -= gv;
                    }
                });
            }
            Op::Mul(a, b) => {
                with_grad!(*a, da => {
                    for ((d, gv), y) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gv * y;
                    }
                });
                with_grad!(*b, db => {
                    for ((d, gv), x) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gv * x;
                    }
                });
            }
            Op::AddBias(x, b) => {
                with_grad!(*x, dx => {
                    add_into(dx, g);
                });
                with_grad!(*b, db => {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                });
            }
            Op::Scale(x, s) => {
                with_grad!(*x, dx => {
                    for (d, gv) in dx.iter_mut().zip(g) {
                        *d += s * gv;
                    }
                });
            }
            Op::Sigmoid(x) => {
                with_grad!(*x, dx => {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * y * (1.0 - y);
                    }
                });
            }
            Op::Tanh(x) => {
                with_grad!(*x, dx => {
                    for ((d, gv), y) in dx.iter_mut().zip(g).zip(node.value.data()) {
                        *d += gv * (1.0 - y * y);
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                with_grad!(*x, dx => {
                    for ((d, gv), xin) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += if *xin > 0.0 { *gv } else { slope * gv };
                    }
                });
            }
            Op::Abs(x) => {
                with_grad!(*x, dx => {
                    for ((d, gv), xin) in dx.iter_mut().zip(g).zip(val(*x).data()) {
                        *d += gv * xin.signum() * f64::from(u8::from(*xin != 0.0));
                    }
                });
            }
            Op::Softmax(x) => {
                with_grad!(*x, dx => {
                    let n = *node.value.shape().last().unwrap();
                    for ((d, gr), y) in dx.chunks_mut(n).zip(g.chunks(n)).zip(node.value.data().chunks(n)) {
                        let dot: f64 = gr.iter().zip(y).map(|(a, b)| a * b).sum();
                        for ((di, gi), yi) in d.iter_mut().zip(gr).zip(y) {
                            *di += yi * (gi - dot);
                        }
                    }
                });
            }
            Op::Conv2d { x, kernel, bias } => {
                let mut take = |v: Var| {
                    nodes[v.0]
                        .needs_grad
                        .then(|| grads[v.0].take().unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]))
                };
                let (mut dx, mut dk, mut db) = (take(*x), take(*kernel), take(*bias));
                conv2d_backward(val(*x), val(*kernel), g, dx.as_mut(), dk.as_mut(), db.as_mut());
                for (v, buf) in [(*x, dx), (*kernel, dk), (*bias, db)] {
                    if let Some(buf) = buf {
                        put_back(grads, v, buf);
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                with_grad!(*x, dx => {
                    for (&idx, gv) in argmax.iter().zip(g) {
                        dx[idx] += gv;
                    }
                });
            }
            Op::Reshape(x) => {
                with_grad!(*x, dx => {
                    add_into(dx, g);
                });
            }
            Op::FramesFromChannels(x) => {
                with_grad!(*x, dx => {
                    let s = val(*x).shape();
                    let (c, t, f) = (s[0], s[1], s[2]);
                    for ch in 0..c {
                        for ti in 0..t {
                            let src = &g[ti * c * f + ch * f..ti * c * f + (ch + 1) * f];
                            add_into(&mut dx[(ch * t + ti) * f..(ch * t + ti + 1) * f], src);
                        }
                    }
                });
            }
            Op::Row(x, i) => {
                with_grad!(*x, dx => {
                    let n = g.len();
                    add_into(&mut dx[i * n..(i + 1) * n], g);
                });
            }
            Op::Stack(rows) => {
                let n = node.value.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    with_grad!(r, dr => {
                        add_into(dr, &g[i * n..(i + 1) * n]);
                    });
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    with_grad!(p, dp => {
                        add_into(dp, &g[off..off + len]);
                    });
                    off += len;
                }
            }
            Op::ConcatCols(a, b) => {
                let (p, q) = (val(*a).shape()[1], val(*b).shape()[1]);
                with_grad!(*a, da => {
                    for (d, gr) in da.chunks_mut(p).zip(g.chunks(p + q)) {
                        add_into(d, &gr[..p]);
                    }
                });
                with_grad!(*b, db => {
                    for (d, gr) in db.chunks_mut(q).zip(g.chunks(p + q)) {
                        add_into(d, &gr[p..]);
                    }
                });
            }
            Op::Slice(x, start) => {
                with_grad!(*x, dx => {
                    add_into(&mut dx[*start..*start + g.len()], g);
                });
            }
            Op::Sum(x) => {
                with_grad!(*x, dx => {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                with_grad!(*logits, dl => {
                    let c = probs.len() / targets.len();
                    let scale = g[0] / targets.len() as f64;
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * c + j] += scale * (probs[i * c + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

fn put_back(grads: &mut [Option<Vec<f64>>], v: Var, buf: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => add_into(existing, &buf),
        slot => *slot = Some(buf),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn conv2d_backward(
    x: &Tensor,
    k: &Tensor,
    g: &[f64],
    mut dx: Option<&mut Vec<f64>>,
    mut dk: Option<&mut Vec<f64>>,
    db: Option<&mut Vec<f64>>,
) {
    let (ci_n, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co_n, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let (ph, pw) = ((kh / 2) as isize, (kw / 2) as isize);
    let (xd, kd) = (x.data(), k.data());
    if let Some(db) = db {
        for co in 0..co_n {
            db[co] += g[co * h * w..(co + 1) * h * w].iter().sum::<f64>();
        }
    }
    if dx.is_none() && dk.is_none() {
        return;
    }
    for co in 0..co_n {
        let gp = &g[co * h * w..(co + 1) * h * w];
        for ci in 0..ci_n {
            let xin = &xd[ci * h * w..(ci + 1) * h * w];
            for kt in 0..kh {
                let dt = kt as isize - ph;
                let (t0, t1) = valid_range(dt, h);
                for kf in 0..kw {
                    let df = kf as isize - pw;
                    let (f0, f1) = valid_range(df, w);
                    let kidx = ((co * ci_n + ci) * kh + kt) * kw + kf;
                    let wv = kd[kidx];
                    let mut acc = 0.0;
                    for t in t0..t1 {
                        let src_t = (t as isize + dt) as usize;
                        let gr = &gp[t * w + f0..t * w + f1];
                        let s0 = ((src_t * w) as isize + f0 as isize + df) as usize;
                        if dk.is_some() {
                            acc += gr.iter().zip(&xin[s0..s0 + (f1 - f0)]).map(|(a, b)| a * b).sum::<f64>();
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let base = ci * h * w + s0;
                            for (d, gv) in dx[base..base + (f1 - f0)].iter_mut().zip(gr) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(dk) = dk.as_deref_mut() {
                        dk[kidx] += acc;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 4] = 1.0;
        }
        let i3 = tape.constant(Tensor::matrix(3, 3, eye).unwrap());
        let v = tape.constant(Tensor::matrix(3, 1, vec![0.5, -2.0, 7.0]).unwrap());
        let out = tape.matmul(i3, v).unwrap();
        assert_eq!(tape.value(out).data(), &[0.5, -2.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn conv_zero_input_is_bias_broadcast() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 6, 4]));
        let k = tape.constant(Tensor::full(&[3, 2, 5, 3], 0.7));
        let b = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
        let y = tape.conv2d(x, k, b).unwrap();
        let yv = tape.value(y);
        assert_eq!(yv.shape(), &[3, 6, 4]);
        for (co, &bias) in [1.0, -2.0, 0.5].iter().enumerate() {
            assert!(yv.data()[co * 24..(co + 1) * 24].iter().all(|&v| v == bias));
        }
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..7 * 5).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(Tensor::new(vec![1, 7, 5], data.clone()).unwrap());
        let mut kd = vec![0.0; 15];
        kd[2 * 3 + 1] = 1.0;
        let k = tape.constant(Tensor::new(vec![1, 1, 5, 3], kd).unwrap());
        let b = tape.constant(Tensor::vector(vec![0.0]));
        let y = tape.conv2d(x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 6, 4]));
        let k = tape.constant(Tensor::zeros(&[2, 2, 5, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        assert!(matches!(tape.conv2d(x, k, b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn maxpool_small_cases() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        // constant input: each window's gradient lands on its first element
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 4, 4], 3.0));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0; 4]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap().wrt(x);
        let mut expect = vec![0.0; 16];
        for idx in [0, 2, 8, 10] {
            expect[idx] = 1.0;
        }
        assert_eq!(g.data(), &expect[..]);
    }

    #[test]
    fn maxpool_drops_odd_edges() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 5, 3], 1.0));
        let y = tape.maxpool2(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 1]);
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        for &v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
        let y = tape.softmax(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0]);
    }

    #[test]
    fn constants_never_materialize_gradients() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::vector(vec![3.0, 4.0]));
        let p = tape.mul(a, c).unwrap();
        let s = tape.sum(p);
        let grads = tape.backward(s).unwrap();
        assert!(!grads.materialized(c));
        assert_eq!(grads.wrt(a).data(), &[3.0, 4.0]);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::vector(vec![0.0; 4]));
        assert!(tape.softmax_cross_entropy(l, &[4]).is_err());
        let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-15);
    }
}
