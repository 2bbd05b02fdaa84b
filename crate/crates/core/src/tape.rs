//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an append-only list of nodes. Recording an operation
//! allocates a fresh output tensor (values already on the tape are never
//! mutated), stores the parent indices plus whatever the backward rule needs,
//! and returns a [`Var`] handle. Because nodes only ever reference earlier
//! nodes, the list is topologically ordered by construction and
//! [`Tape::backward`] is a single reverse sweep that visits each node once.
//!
//! Gradients flow to *leaves* (registered with [`Tape::leaf`]); tensors that
//! participate in the forward pass but never need gradients enter via
//! [`Tape::constant`], and backward skips every partial derivative that no
//! leaf depends on. Tapes are single-threaded values; parallel code gives
//! each unit of work its own tape.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::{gemm_into, Scalar};
use crate::tensor::{softmax_slice, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Constant,
    /// `[m,k] @ [k,n] -> [m,n]`
    MatMul { a: Var, b: Var },
    /// Cross-correlation, stride 1, square kernel, explicit zero padding.
    Conv2d { x: Var, w: Var, b: Var, pad: usize, col: Vec<T> },
    /// 2x2 window, stride 2; `idx` holds the flat input index of each winner.
    MaxPool2d { x: Var, idx: Vec<u32> },
    Relu { x: Var },
    Reshape { x: Var },
    Add { a: Var, b: Var },
    /// `[r,c] + bias[r]` broadcast across columns.
    AddColBias { m: Var, bias: Var },
    /// k vectors of length d side by side into `[d,k]`.
    StackCols { parts: Vec<Var> },
    /// Column `j` of `[r,c]` as a vector `[r]`.
    Col { m: Var, j: usize },
    Scale { x: Var, c: T },
    /// Stable softmax over a vector; the node value doubles as saved probs.
    Softmax { x: Var },
    /// `-log softmax(logits)[label]`, computed in log-sum-exp form.
    SoftmaxCrossEntropy { logits: Var, label: usize, probs: Vec<T> },
    /// Element `i` of a vector as a scalar.
    Pick { v: Var, i: usize },
    /// k scalars into a vector `[k]`.
    StackScalars { parts: Vec<Var> },
    Sum { v: Var },
    /// `v / s` elementwise for a scalar `s`.
    DivScalar { v: Var, s: Var },
    Ln { x: Var },
    Neg { x: Var },
    /// Forward value computed outside the tape; backward is the identity.
    StraightThrough { x: Var },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    needs_grad: bool,
}

/// Gradients of one scalar output with respect to every registered leaf.
///
/// After [`Tape::backward`] every leaf has exactly one entry; leaves the loss
/// does not depend on map to zero tensors of the leaf's shape.
pub struct GradientMap<T> {
    grads: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v.0)
    }

    /// Gradient for a registered leaf; panics for non-leaves.
    pub fn of(&self, v: Var) -> &Tensor<T> {
        self.grads
            .get(&v.0)
            .unwrap_or_else(|| panic!("no gradient entry for var {}; not a registered leaf", v.0))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.remove(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    leaves: Vec<Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), leaves: Vec::new() }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Current value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Register a differentiable leaf. Its gradient appears in every
    /// [`GradientMap`] produced by this tape.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, t, true);
        self.leaves.push(v);
        v
    }

    /// Register a non-differentiable input; backward never differentiates
    /// through it or allocates a gradient buffer for it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Constant, t, false)
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// `[m,k] @ [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul of {sa:?} with {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm_into(m, k, n, self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::MatMul { a, b }, Tensor::new(vec![m, n], out)?, needs))
    }

    /// 2-D cross-correlation plus per-channel bias.
    ///
    /// `x` is `[C,H,W]`, `w` is `[O,C,k,k]` with a square kernel, `b` is
    /// `[O]`; stride is 1 and the input is zero-padded by `pad` on all sides,
    /// so the output is `[O, H+2*pad-k+1, W+2*pad-k+1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, pad: usize) -> Result<Var> {
        let sx = self.value(x).shape().to_vec();
        let sw = self.value(w).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            return Err(Error::Shape(format!("conv2d of x{sx:?}, w{sw:?}, b{sb:?}")));
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, wc, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if wc != c || kh != kw || sb[0] != o {
            return Err(Error::Shape(format!(
                "conv2d kernel {sw:?} / bias {sb:?} incompatible with input {sx:?}"
            )));
        }
        let k = kh;
        if k == 0 || k > h + 2 * pad || k > wd + 2 * pad {
            return Err(Error::InvalidArgument(format!(
                "conv2d kernel {k} outside padded extent of {h}x{wd} with pad {pad}"
            )));
        }
        let ho = h + 2 * pad - k + 1;
        let wo = wd + 2 * pad - k + 1;
        let col = im2col(self.value(x).data(), c, h, wd, k, pad, ho, wo);
        let ckk = c * k * k;
        let hw = ho * wo;
        let mut out = vec![T::zero(); o * hw];
        gemm_into(o, ckk, hw, self.value(w).data(), false, &col, false, T::zero(), &mut out);
        let bias = self.value(b).data().to_vec();
        for (oc, bo) in bias.iter().enumerate() {
            for v in &mut out[oc * hw..(oc + 1) * hw] {
                *v += *bo;
            }
        }
        let needs = self.needs(&[x, w, b]);
        Ok(self.push(Op::Conv2d { x, w, b, pad, col }, Tensor::new(vec![o, ho, wo], out)?, needs))
    }

    /// 2x2 max pooling with stride 2; both spatial extents must be even.
    /// Within a tied window the first cell in row-major order wins and takes
    /// the whole gradient.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Shape(format!("maxpool2d of {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 || h == 0 || w == 0 {
            return Err(Error::InvalidArgument(format!(
                "maxpool2d needs even spatial extents, got {h}x{w}"
            )));
        }
        let (ho, wo) = (h / 2, w / 2);
        let data = self.value(x).data();
        let mut out = vec![T::zero(); c * ho * wo];
        let mut idx = vec![0u32; c * ho * wo];
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_i = (ch * h + 2 * oy) * w + 2 * ox;
                    let mut best = data[best_i];
                    // Row-major within the window; strict > keeps the first.
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                        if data[i] > best {
                            best = data[i];
                            best_i = i;
                        }
                    }
                    out[(ch * ho + oy) * wo + ox] = best;
                    idx[(ch * ho + oy) * wo + ox] = best_i as u32;
                }
            }
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::MaxPool2d { x, idx }, Tensor::new(vec![c, ho, wo], out)?, needs))
    }

    /// Elementwise `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let needs = self.needs(&[x]);
        self.push(Op::Relu { x }, out, needs)
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Reshape { x }, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(Op::Add { a, b }, out, needs))
    }

    /// `[r,c] + bias[r]`, the bias broadcast across columns.
    pub fn add_col_bias(&mut self, m: Var, bias: Var) -> Result<Var> {
        let sm = self.value(m).shape().to_vec();
        let sbias = self.value(bias).shape().to_vec();
        if sm.len() != 2 || sbias.len() != 1 || sbias[0] != sm[0] {
            return Err(Error::Shape(format!("add_col_bias of {sm:?} with {sbias:?}")));
        }
        let (r, c) = (sm[0], sm[1]);
        let mut out = self.value(m).data().to_vec();
        let bd = self.value(bias).data();
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += bd[i];
            }
        }
        let needs = self.needs(&[m, bias]);
        Ok(self.push(Op::AddColBias { m, bias }, Tensor::new(vec![r, c], out)?, needs))
    }

    /// k same-length vectors side by side into `[d, k]`.
    pub fn stack_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack_cols of zero vectors".into()));
        }
        let d = self.value(parts[0]).len();
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 1 || s[0] != d {
                return Err(Error::Shape(format!("stack_cols wants [{d}] vectors, got {s:?}")));
            }
        }
        let k = parts.len();
        let mut out = vec![T::zero(); d * k];
        for (j, &p) in parts.iter().enumerate() {
            for (i, &v) in self.value(p).data().iter().enumerate() {
                out[i * k + j] = v;
            }
        }
        let needs = self.needs(parts);
        Ok(self.push(Op::StackCols { parts: parts.to_vec() }, Tensor::new(vec![d, k], out)?, needs))
    }

    /// Column `j` of a matrix as a vector.
    pub fn col(&mut self, m: Var, j: usize) -> Result<Var> {
        let s = self.value(m).shape().to_vec();
        if s.len() != 2 || j >= s[1] {
            return Err(Error::Shape(format!("col {j} of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let data = self.value(m).data();
        let out: Vec<T> = (0..r).map(|i| data[i * c + j]).collect();
        let needs = self.needs(&[m]);
        Ok(self.push(Op::Col { m, j }, Tensor::new(vec![r], out)?, needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).scale(c);
        let needs = self.needs(&[x]);
        self.push(Op::Scale { x, c }, out, needs)
    }

    /// Stable softmax over a vector.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Shape(format!("softmax of {s:?}")));
        }
        let probs = softmax_slice(self.value(x).data());
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Softmax { x }, Tensor::new(vec![s[0]], probs)?, needs))
    }

    /// `-log softmax(logits)[label]` as a scalar, in log-sum-exp form so huge
    /// logits neither overflow nor lose the loss to rounding.
    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let s = self.value(logits).shape();
        if s.len() != 1 || s[0] == 0 {
            return Err(Error::Shape(format!("softmax_cross_entropy of {s:?}")));
        }
        if label >= s[0] {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {} classes",
                s[0]
            )));
        }
        let data = self.value(logits).data();
        let m = data.iter().fold(T::neg_infinity(), |acc, &v| acc.max(v));
        let sum_exp = data.iter().fold(T::zero(), |acc, &v| acc + (v - m).exp());
        let loss = m + sum_exp.ln() - data[label];
        let probs = softmax_slice(data);
        let needs = self.needs(&[logits]);
        Ok(self.push(
            Op::SoftmaxCrossEntropy { logits, label, probs },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Element `i` of a vector as a scalar.
    pub fn pick(&mut self, v: Var, i: usize) -> Result<Var> {
        let s = self.value(v).shape();
        if s.len() != 1 || i >= s[0] {
            return Err(Error::Shape(format!("pick {i} of {s:?}")));
        }
        let out = Tensor::scalar(self.value(v).data()[i]);
        let needs = self.needs(&[v]);
        Ok(self.push(Op::Pick { v, i }, out, needs))
    }

    /// k scalars into a vector `[k]`.
    pub fn stack_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("stack_scalars of zero values".into()));
        }
        let mut out = Vec::with_capacity(parts.len());
        for &p in parts {
            if self.value(p).len() != 1 {
                return Err(Error::Shape(format!(
                    "stack_scalars wants scalars, got {:?}",
                    self.value(p).shape()
                )));
            }
            out.push(self.value(p).data()[0]);
        }
        let needs = self.needs(parts);
        Ok(self.push(
            Op::StackScalars { parts: parts.to_vec() },
            Tensor::new(vec![parts.len()], out)?,
            needs,
        ))
    }

    /// Sum of a vector as a scalar.
    pub fn sum(&mut self, v: Var) -> Result<Var> {
        let s = self.value(v).shape();
        if s.len() != 1 {
            return Err(Error::Shape(format!("sum of {s:?}")));
        }
        let total = self.value(v).data().iter().fold(T::zero(), |a, &b| a + b);
        let needs = self.needs(&[v]);
        Ok(self.push(Op::Sum { v }, Tensor::scalar(total), needs))
    }

    /// `v / s` for a scalar `s`; `s` must be nonzero.
    pub fn div_scalar(&mut self, v: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape(format!("div_scalar divisor {:?}", self.value(s).shape())));
        }
        let sv = self.value(s).data()[0];
        if sv == T::zero() || !sv.is_finite() {
            return Err(Error::Domain(format!("division by {sv}")));
        }
        let out = self.value(v).map(|x| x / sv);
        let needs = self.needs(&[v, s]);
        Ok(self.push(Op::DivScalar { v, s }, out, needs))
    }

    /// Elementwise natural log; every element must be strictly positive.
    pub fn ln(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v <= T::zero()) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let out = self.value(x).map(|v| v.ln());
        let needs = self.needs(&[x]);
        Ok(self.push(Op::Ln { x }, out, needs))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| -v);
        let needs = self.needs(&[x]);
        self.push(Op::Neg { x }, out, needs)
    }

    /// Insert `value` as if it were computed from `x`, but treat the mapping
    /// as the identity in backward: the incoming gradient passes through
    /// unchanged. This is the straight-through estimator used to
    /// differentiate "around" a non-differentiable or iterative
    /// transformation whose output was computed outside the tape.
    pub fn straight_through(&mut self, x: Var, value: Tensor<T>) -> Result<Var> {
        if value.shape() != self.value(x).shape() {
            return Err(Error::Shape(format!(
                "straight_through value {:?} vs parent {:?}",
                value.shape(),
                self.value(x).shape()
            )));
        }
        let needs = self.needs(&[x]);
        Ok(self.push(Op::StraightThrough { x }, value, needs))
    }

    /// Reverse sweep from a scalar `loss`. Returns the gradient of `loss`
    /// with respect to every registered leaf (zeros for leaves the loss does
    /// not depend on).
    pub fn backward(&self, loss: Var) -> Result<GradientMap<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            // Leaves keep their accumulated gradient for collection below.
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
            }
        }

        let mut map = HashMap::with_capacity(self.leaves.len());
        for &leaf in &self.leaves {
            let shape = self.value(leaf).shape().to_vec();
            let t = match grads[leaf.0].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => Tensor::zeros(shape),
            };
            map.insert(leaf.0, t);
        }
        Ok(GradientMap { grads: map })
    }

    /// Push `g`, the gradient at node `id`, into the node's parents.
    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &self.nodes[id].op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let s = self.value(*a).shape();
                    (s[0], s[1])
                };
                let n = self.value(*b).shape()[1];
                if self.nodes[a.0].needs_grad {
                    let da = self.slot(*a, grads);
                    // dA = dC @ B^T : (m x k) = (m x n) @ (n x k)
                    gemm_into(m, n, k, g, false, self.value(*b).data(), true, T::one(), da);
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.slot(*b, grads);
                    // dB = A^T @ dC : (k x n) = (k x m) @ (m x n)
                    gemm_into(k, m, n, self.value(*a).data(), true, g, false, T::one(), db);
                }
            }
            Op::Conv2d { x, w, b, pad, col } => {
                let sx = self.value(*x).shape().to_vec();
                let sw = self.value(*w).shape().to_vec();
                let (c, h, wd) = (sx[0], sx[1], sx[2]);
                let (o, k) = (sw[0], sw[2]);
                let ho = h + 2 * pad - k + 1;
                let wo = wd + 2 * pad - k + 1;
                let (ckk, hw) = (c * k * k, ho * wo);
                if self.nodes[w.0].needs_grad {
                    let dw = self.slot(*w, grads);
                    // dW = dOut @ col^T : (o x ckk) = (o x hw) @ (hw x ckk)
                    gemm_into(o, hw, ckk, g, false, col, true, T::one(), dw);
                }
                if self.nodes[b.0].needs_grad {
                    let db = self.slot(*b, grads);
                    for oc in 0..o {
                        let mut s = T::zero();
                        for j in 0..hw {
                            s += g[oc * hw + j];
                        }
                        db[oc] += s;
                    }
                }
                if self.nodes[x.0].needs_grad {
                    // dcol = W^T @ dOut : (ckk x hw) = (ckk x o) @ (o x hw)
                    let mut dcol = vec![T::zero(); ckk * hw];
                    gemm_into(ckk, o, hw, self.value(*w).data(), true, g, false, T::zero(), &mut dcol);
                    let dx = self.slot(*x, grads);
                    col2im_acc(&dcol, c, h, wd, k, *pad, ho, wo, dx);
                }
            }
            Op::MaxPool2d { x, idx } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.slot(*x, grads);
                    for (j, &i) in idx.iter().enumerate() {
                        dx[i as usize] += g[j];
                    }
                }
            }
            Op::Relu { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = self.value(*x).data();
                    let dx = self.slot(*x, grads);
                    for (i, &gi) in g.iter().enumerate() {
                        if xv[i] > T::zero() {
                            dx[i] += gi;
                        }
                    }
                }
            }
            Op::Reshape { x } | Op::StraightThrough { x } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.slot(*x, grads);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
            }
            Op::Add { a, b } => {
                for p in [a, b] {
                    if self.nodes[p.0].needs_grad {
                        let dp = self.slot(*p, grads);
                        for (d, &gi) in dp.iter_mut().zip(g) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::AddColBias { m, bias } => {
                let c = self.value(*m).shape()[1];
                if self.nodes[m.0].needs_grad {
                    let dm = self.slot(*m, grads);
                    for (d, &gi) in dm.iter_mut().zip(g) {
                        *d += gi;
                    }
                }
                if self.nodes[bias.0].needs_grad {
                    let r = self.value(*bias).len();
                    let db = self.slot(*bias, grads);
                    for i in 0..r {
                        let mut s = T::zero();
                        for j in 0..c {
                            s += g[i * c + j];
                        }
                        db[i] += s;
                    }
                }
            }
            Op::StackCols { parts } => {
                let k = parts.len();
                let d = self.value(parts[0]).len();
                for (j, p) in parts.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        let dp = self.slot(*p, grads);
                        for i in 0..d {
                            dp[i] += g[i * k + j];
                        }
                    }
                }
            }
            Op::Col { m, j } => {
                if self.nodes[m.0].needs_grad {
                    let c = self.value(*m).shape()[1];
                    let dm = self.slot(*m, grads);
                    for (i, &gi) in g.iter().enumerate() {
                        dm[i * c + j] += gi;
                    }
                }
            }
            Op::Scale { x, c } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.slot(*x, grads);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d += *c * gi;
                    }
                }
            }
            Op::Softmax { x } => {
                if self.nodes[x.0].needs_grad {
                    let p = self.nodes[id].value.data();
                    let dot = g.iter().zip(p).fold(T::zero(), |acc, (&gi, &pi)| acc + gi * pi);
                    let dx = self.slot(*x, grads);
                    for i in 0..p.len() {
                        dx[i] += p[i] * (g[i] - dot);
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, label, probs } => {
                if self.nodes[logits.0].needs_grad {
                    let dl = self.slot(*logits, grads);
                    let g0 = g[0];
                    for (i, &pi) in probs.iter().enumerate() {
                        let ind = if i == *label { T::one() } else { T::zero() };
                        dl[i] += g0 * (pi - ind);
                    }
                }
            }
            Op::Pick { v, i } => {
                if self.nodes[v.0].needs_grad {
                    let dv = self.slot(*v, grads);
                    dv[*i] += g[0];
                }
            }
            Op::StackScalars { parts } => {
                for (j, p) in parts.iter().enumerate() {
                    if self.nodes[p.0].needs_grad {
                        let dp = self.slot(*p, grads);
                        dp[0] += g[j];
                    }
                }
            }
            Op::Sum { v } => {
                if self.nodes[v.0].needs_grad {
                    let dv = self.slot(*v, grads);
                    for d in dv.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::DivScalar { v, s } => {
                let sv = self.value(*s).data()[0];
                if self.nodes[v.0].needs_grad {
                    let dv = self.slot(*v, grads);
                    for (d, &gi) in dv.iter_mut().zip(g) {
                        *d += gi / sv;
                    }
                }
                if self.nodes[s.0].needs_grad {
                    let vv = self.value(*v).data();
                    let num = g.iter().zip(vv).fold(T::zero(), |acc, (&gi, &vi)| acc + gi * vi);
                    let ds = self.slot(*s, grads);
                    ds[0] += -num / (sv * sv);
                }
            }
            Op::Ln { x } => {
                if self.nodes[x.0].needs_grad {
                    let xv = self.value(*x).data();
                    let dx = self.slot(*x, grads);
                    for (i, &gi) in g.iter().enumerate() {
                        dx[i] += gi / xv[i];
                    }
                }
            }
            Op::Neg { x } => {
                if self.nodes[x.0].needs_grad {
                    let dx = self.slot(*x, grads);
                    for (d, &gi) in dx.iter_mut().zip(g) {
                        *d -= gi;
                    }
                }
            }
        }
    }

    /// Gradient buffer of a parent node, allocated as zeros on first touch.
    #[allow(clippy::mut_from_ref)]
    fn slot<'g>(&self, v: Var, grads: &'g mut [Option<Vec<T>>]) -> &'g mut Vec<T> {
        grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).len()])
    }
}

/// Unfold `[C,H,W]` into the `[C*k*k, Ho*Wo]` patch matrix of a stride-1,
/// zero-padded cross-correlation.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Vec<T> {
    let mut col = vec![T::zero(); c * k * k * ho * wo];
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                // Valid output columns: 0 <= ox + kx - pad < w.
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = (ch * h + iy as usize) * w + (ox_lo + kx - pad);
                    let dst = row + oy * wo + ox_lo;
                    col[dst..dst + (ox_hi - ox_lo)]
                        .copy_from_slice(&x[src..src + (ox_hi - ox_lo)]);
                }
            }
        }
    }
    col
}

/// Fold a patch-matrix gradient back onto the input, accumulating overlaps.
#[allow(clippy::too_many_arguments)]
fn col2im_acc<T: Scalar>(
    dcol: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let hw = ho * wo;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let ox_lo = pad.saturating_sub(kx);
                let ox_hi = (w + pad - kx).min(wo);
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in 0..ho {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = row + oy * wo + ox_lo;
                    let dst = (ch * h + iy as usize) * w + (ox_lo + kx - pad);
                    for i in 0..(ox_hi - ox_lo) {
                        dx[dst + i] += dcol[src + i];
                    }
                }
            }
        }
    }
}
