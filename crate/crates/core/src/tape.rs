//! Define-by-run reverse-mode automatic differentiation.
//!
//! Every operation evaluates eagerly and appends a node to the [`Tape`]. Nodes
//! only reference earlier nodes, so the node list is always in topological
//! order and [`Tape::backward`] is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::TensorError;
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node recorded on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Identifier of a trainable parameter; the index into a
/// [`ParamStore`](crate::params::ParamStore).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Param(ParamId),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MulScalar { a: usize, s: usize },
    AddScalar { a: usize, s: usize },
    DivScalar { a: usize, s: usize },
    Scale { a: usize, factor: f64 },
    Offset { a: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Sum { a: usize, axis: Option<usize> },
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Softmax { a: usize, axis: usize },
    Power { base: usize, exponent: usize },
    Clip { a: usize, lo: f64, hi: f64 },
    CircularConv { signal: usize, kernel: usize },
    L2Norm { a: usize, axis: Option<usize> },
    BceWithLogits { logits: usize, targets: Tensor },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Gradients of a scalar loss with respect to every parameter registered on
/// the tape it was computed from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(&id, t)| (id, t))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Append-only record of a forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: HashMap<ParamId, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
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

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `max(z,0) - z*y + log(1 + exp(-|z|))`, the stable sigmoid cross-entropy.
pub(crate) fn bce_with_logits(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

fn circular_index(i: usize, offset: isize, n: usize) -> usize {
    (i as isize - offset).rem_euclid(n as isize) as usize
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn index(&self, v: Var) -> Result<usize, TensorError> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::DetachedNode);
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor, TensorError> {
        let i = self.index(v)?;
        Ok(&self.nodes[i].value)
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    fn val(&self, i: usize) -> &Tensor {
        &self.nodes[i].value
    }

    /// Records a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value)
    }

    /// Records a trainable leaf. Registering the same id twice returns the
    /// original node.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&index) = self.params.get(&id) {
            return Var { tape: self.id, index };
        }
        let v = self.push(Op::Param(id), value.clone());
        self.params.insert(id, v.index);
        v
    }

    /// Matrix product. Accepts `[m,k]@[k,n]`, `[m,k]@[k]`, `[k]@[k,n]` and
    /// `[k]@[k]`; rank-1 operands drop the corresponding output axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let (sa, sb) = (self.val(ia).shape(), self.val(ib).shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        let (m, ka, a_rows) = match sa.len() {
            1 => (1, sa[0], false),
            2 => (sa[0], sa[1], true),
            _ => return Err(mismatch()),
        };
        let (kb, n, b_cols) = match sb.len() {
            1 => (sb[0], 1, false),
            2 => (sb[0], sb[1], true),
            _ => return Err(mismatch()),
        };
        if ka != kb {
            return Err(mismatch());
        }
        let k = ka;
        let mut out_shape = Vec::with_capacity(2);
        if a_rows {
            out_shape.push(m);
        }
        if b_cols {
            out_shape.push(n);
        }
        let ad = self.val(ia).data();
        let bd = self.val(ib).data();
        let mut out = vec![0.0; m * n];
        if n == 1 {
            for (o, arow) in out.iter_mut().zip(ad.chunks_exact(k)) {
                *o = dot(arow, bd);
            }
        }
        for i in 0..if n == 1 { 0 } else { m } {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let x = ad[i * k + p];
                if x == 0.0 {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &y) in row.iter_mut().zip(brow) {
                    *o += x * y;
                }
            }
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::MatMul { a: ia, b: ib, m, k, n }, value))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var, TensorError> {
        let (ia, ib) = (self.index(a)?, self.index(b)?);
        let value = self.val(ia).zip_map(self.val(ib), name, f)?;
        Ok(self.push(op(ia, ib), value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn scalar_operand(&self, s: Var, op: &'static str) -> Result<(usize, f64), TensorError> {
        let is = self.index(s)?;
        let t = self.val(is);
        if t.len() != 1 {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: vec![1],
                rhs: t.shape().to_vec(),
            });
        }
        Ok((is, t.data()[0]))
    }

    /// Multiplies every element of `a` by the one-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let (is, sv) = self.scalar_operand(s, "mul_scalar")?;
        let value = self.val(ia).map(|x| x * sv);
        Ok(self.push(Op::MulScalar { a: ia, s: is }, value))
    }

    /// Adds the one-element tensor `s` to every element of `a`.
    pub fn add_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let (is, sv) = self.scalar_operand(s, "add_scalar")?;
        let value = self.val(ia).map(|x| x + sv);
        Ok(self.push(Op::AddScalar { a: ia, s: is }, value))
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let (is, sv) = self.scalar_operand(s, "div_scalar")?;
        let value = self.val(ia).map(|x| x / sv);
        Ok(self.push(Op::DivScalar { a: ia, s: is }, value))
    }

    /// `a * factor` for a fixed constant.
    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let value = self.val(ia).map(|x| x * factor);
        Ok(self.push(Op::Scale { a: ia, factor }, value))
    }

    /// `a + c` for a fixed constant.
    pub fn offset(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let value = self.val(ia).map(|x| x + c);
        Ok(self.push(Op::Offset { a: ia }, value))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let indices = parts.iter().map(|&v| self.index(v)).collect::<Result<Vec<_>, _>>()?;
        let Some(&first) = indices.first() else {
            return Err(TensorError::InvalidArgument {
                op: "concat",
                detail: "no inputs".into(),
            });
        };
        let base = self.val(first).shape().to_vec();
        if axis >= base.len() {
            return Err(TensorError::InvalidAxis {
                op: "concat",
                axis,
                rank: base.len(),
            });
        }
        let mut total = 0;
        for &i in &indices {
            let s = self.val(i).shape();
            let conform = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !conform {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &i in &indices {
                let t = self.val(i);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Concat { inputs: indices, axis }, value))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let (outer, dim, inner) = t.axis_extents(axis, "slice")?;
        if start + len > dim {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                detail: format!("range {start}..{} exceeds axis length {dim}", start + len),
            });
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * dim + start) * inner;
            data.extend_from_slice(&t.data()[from..from + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Slice { a: ia, axis, start }, value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let value = self.val(ia).reshape(shape)?;
        Ok(self.push(Op::Reshape { a: ia }, value))
    }

    /// Sum of all elements (rank-0 result) or along one axis.
    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let value = match axis {
            None => Tensor::scalar(t.sum()),
            Some(ax) => {
                let (outer, dim, inner) = t.axis_extents(ax, "sum")?;
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..inner {
                            data[o * inner + i] += t.data()[base + i];
                        }
                    }
                }
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, data)?
            }
        };
        Ok(self.push(Op::Sum { a: ia, axis }, value))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let value = self.val(ia).map(f);
        Ok(self.push(op(ia), value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::tanh, Op::Tanh)
    }

    /// `log(exp(x) + 1)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, softplus, Op::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(a, f64::exp, Op::Exp)
    }

    /// Softmax along `axis`, with the per-slice maximum subtracted first.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let (outer, dim, inner) = t.axis_extents(axis, "softmax")?;
        let src = t.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let max = (0..dim).map(|d| src[at(d)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for d in 0..dim {
                    let e = (src[at(d)] - max).exp();
                    data[at(d)] = e;
                    total += e;
                }
                for d in 0..dim {
                    data[at(d)] /= total;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax { a: ia, axis }, value))
    }

    /// Elementwise `base ^ exponent` for a non-negative base and a
    /// one-element exponent tensor.
    pub fn power(&mut self, base: Var, exponent: Var) -> Result<Var, TensorError> {
        let ib = self.index(base)?;
        let (ie, p) = self.scalar_operand(exponent, "power")?;
        let value = self.val(ib).map(|x| x.powf(p));
        Ok(self.push(Op::Power { base: ib, exponent: ie }, value))
    }

    /// Clamps every element into `[lo, hi]`.
    pub fn clip(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        if !(lo <= hi) {
            return Err(TensorError::InvalidArgument {
                op: "clip",
                detail: format!("lower bound {lo} exceeds upper bound {hi}"),
            });
        }
        let ia = self.index(a)?;
        let value = self.val(ia).map(|x| x.clamp(lo, hi));
        Ok(self.push(Op::Clip { a: ia, lo, hi }, value))
    }

    /// Circular 1-D convolution `y(i) = sum_k kernel(k) * signal(i - o_k)` with
    /// indices taken modulo the signal length. The kernel must have odd length
    /// `K`; entry `k` corresponds to offset `o_k = k - (K-1)/2`.
    pub fn circular_convolve(&mut self, signal: Var, kernel: Var) -> Result<Var, TensorError> {
        let (is, ik) = (self.index(signal)?, self.index(kernel)?);
        let (w, s) = (self.val(is), self.val(ik));
        if w.rank() != 1 || s.rank() != 1 || s.len() % 2 == 0 || w.is_empty() {
            return Err(TensorError::ShapeMismatch {
                op: "circular_convolve",
                lhs: w.shape().to_vec(),
                rhs: s.shape().to_vec(),
            });
        }
        let n = w.len();
        let half = (s.len() / 2) as isize;
        let mut out = vec![0.0; n];
        for (k, &sk) in s.data().iter().enumerate() {
            let offset = k as isize - half;
            for (i, o) in out.iter_mut().enumerate() {
                *o += sk * w.data()[circular_index(i, offset, n)];
            }
        }
        let value = Tensor::vector(out);
        Ok(self.push(Op::CircularConv { signal: is, kernel: ik }, value))
    }

    /// Euclidean norm of all elements (rank-0 result) or along one axis.
    pub fn l2_norm(&mut self, a: Var, axis: Option<usize>) -> Result<Var, TensorError> {
        let ia = self.index(a)?;
        let t = self.val(ia);
        let value = match axis {
            None => Tensor::scalar(t.squared_norm().sqrt()),
            Some(ax) => {
                let (outer, dim, inner) = t.axis_extents(ax, "l2_norm")?;
                let mut data = vec![0.0; outer * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        let base = (o * dim + d) * inner;
                        for i in 0..inner {
                            let x = t.data()[base + i];
                            data[o * inner + i] += x * x;
                        }
                    }
                }
                data.iter_mut().for_each(|x| *x = x.sqrt());
                let mut shape = t.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, data)?
            }
        };
        Ok(self.push(Op::L2Norm { a: ia, axis }, value))
    }

    /// Elementwise sigmoid cross-entropy between logits and fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var, TensorError> {
        let il = self.index(logits)?;
        let value = self.val(il).zip_map(targets, "bce_with_logits", bce_with_logits)?;
        Ok(self.push(
            Op::BceWithLogits {
                logits: il,
                targets: targets.clone(),
            },
            value,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Every parameter registered on this
    /// tape receives an entry, zero-filled when the loss does not depend on it.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TensorError> {
        let root = self.index(loss)?;
        if self.val(root).len() != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.val(root).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root + 1];
        grads[root] = Some(Tensor::full(self.val(root).shape(), 1.0));
        let mut out = Gradients::default();

        for idx in (0..=root).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let y = &node.value;
            match &node.op {
                Op::Constant => {}
                Op::Param(id) => {
                    out.map.insert(*id, g);
                }
                Op::MatMul { a, b, m, k, n } => {
                    let (m, k, n) = (*m, *k, *n);
                    let ad = self.val(*a).data();
                    let bd = self.val(*b).data();
                    let gd = g.data();
                    let mut da = vec![0.0; m * k];
                    let mut db = vec![0.0; k * n];
                    if n == 1 {
                        // dA = g b^T, dB = sum of rows of A scaled by g
                        for ((darow, arow), &gi) in da.chunks_exact_mut(k).zip(ad.chunks_exact(k)).zip(gd) {
                            if gi == 0.0 {
                                continue;
                            }
                            for (o, &x) in darow.iter_mut().zip(bd) {
                                *o = gi * x;
                            }
                            for (o, &x) in db.iter_mut().zip(arow) {
                                *o += gi * x;
                            }
                        }
                    } else {
                        // dA = G @ B^T
                        for i in 0..m {
                            let grow = &gd[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                            }
                        }
                    }
                    // dB = A^T @ G
                    for i in 0..if n == 1 { 0 } else { m } {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let x = ad[i * k + p];
                            if x == 0.0 {
                                continue;
                            }
                            for (o, &y) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += x * y;
                            }
                        }
                    }
                    let sa = self.val(*a).shape().to_vec();
                    let sb = self.val(*b).shape().to_vec();
                    accumulate(&mut grads, *a, Tensor::new(sa, da)?);
                    accumulate(&mut grads, *b, Tensor::new(sb, db)?);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, g.map(|x| -x));
                    accumulate(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.val(*b), "mul", |x, y| x * y)?;
                    let db = g.zip_map(self.val(*a), "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Div(a, b) => {
                    let bv = self.val(*b);
                    let da = g.zip_map(bv, "div", |x, y| x / y)?;
                    let db_data = g
                        .data()
                        .iter()
                        .zip(y.data())
                        .zip(bv.data())
                        .map(|((gi, yi), bi)| -gi * yi / bi)
                        .collect();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, Tensor::new(bv.shape().to_vec(), db_data)?);
                }
                Op::MulScalar { a, s } => {
                    let sv = self.val(*s).data()[0];
                    let ds: f64 = g.data().iter().zip(self.val(*a).data()).map(|(x, y)| x * y).sum();
                    accumulate(&mut grads, *s, Tensor::full(self.val(*s).shape(), ds));
                    accumulate(&mut grads, *a, g.map(|x| x * sv));
                }
                Op::AddScalar { a, s } => {
                    accumulate(&mut grads, *s, Tensor::full(self.val(*s).shape(), g.sum()));
                    accumulate(&mut grads, *a, g);
                }
                Op::DivScalar { a, s } => {
                    let sv = self.val(*s).data()[0];
                    let ds: f64 = -g.data().iter().zip(y.data()).map(|(x, q)| x * q).sum::<f64>() / sv;
                    accumulate(&mut grads, *s, Tensor::full(self.val(*s).shape(), ds));
                    accumulate(&mut grads, *a, g.map(|x| x / sv));
                }
                Op::Scale { a, factor } => {
                    let f = *factor;
                    accumulate(&mut grads, *a, g.map(|x| x * f));
                }
                Op::Offset { a } => accumulate(&mut grads, *a, g),
                Op::Concat { inputs, axis } => {
                    let outer: usize = y.shape()[..*axis].iter().product();
                    let inner: usize = y.shape()[axis + 1..].iter().product();
                    let total = y.shape()[*axis];
                    let mut start = 0;
                    for &i in inputs {
                        let shape = self.val(i).shape().to_vec();
                        let len = shape[*axis];
                        let mut data = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let from = (o * total + start) * inner;
                            data.extend_from_slice(&g.data()[from..from + len * inner]);
                        }
                        accumulate(&mut grads, i, Tensor::new(shape, data)?);
                        start += len;
                    }
                }
                Op::Slice { a, axis, start } => {
                    let src = self.val(*a);
                    let (outer, dim, inner) = src.axis_extents(*axis, "slice")?;
                    let len = y.shape()[*axis];
                    let mut data = vec![0.0; src.len()];
                    for o in 0..outer {
                        let to = (o * dim + start) * inner;
                        let from = o * len * inner;
                        data[to..to + len * inner].copy_from_slice(&g.data()[from..from + len * inner]);
                    }
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), data)?);
                }
                Op::Reshape { a } => {
                    let shape = self.val(*a).shape().to_vec();
                    accumulate(&mut grads, *a, g.reshape(&shape)?);
                }
                Op::Sum { a, axis } => {
                    let src = self.val(*a);
                    let da = match axis {
                        None => Tensor::full(src.shape(), g.data()[0]),
                        Some(ax) => {
                            let (outer, dim, inner) = src.axis_extents(*ax, "sum")?;
                            let mut data = vec![0.0; src.len()];
                            for o in 0..outer {
                                for d in 0..dim {
                                    for i in 0..inner {
                                        data[(o * dim + d) * inner + i] = g.data()[o * inner + i];
                                    }
                                }
                            }
                            Tensor::new(src.shape().to_vec(), data)?
                        }
                    };
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = g.zip_map(y, "sigmoid", |gi, s| gi * s * (1.0 - s))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = g.zip_map(y, "tanh", |gi, t| gi * (1.0 - t * t))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Softplus(a) => {
                    let da = g.zip_map(self.val(*a), "softplus", |gi, x| gi * sigmoid(x))?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Exp(a) => {
                    let da = g.zip_map(y, "exp", |gi, e| gi * e)?;
                    accumulate(&mut grads, *a, da);
                }
                Op::Softmax { a, axis } => {
                    let (outer, dim, inner) = y.axis_extents(*axis, "softmax")?;
                    let (yd, gd) = (y.data(), g.data());
                    let mut data = vec![0.0; yd.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |d: usize| (o * dim + d) * inner + i;
                            let dot: f64 = (0..dim).map(|d| yd[at(d)] * gd[at(d)]).sum();
                            for d in 0..dim {
                                data[at(d)] = yd[at(d)] * (gd[at(d)] - dot);
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(y.shape().to_vec(), data)?);
                }
                Op::Power { base, exponent } => {
                    let p = self.val(*exponent).data()[0];
                    let bv = self.val(*base);
                    let mut dexp = 0.0;
                    let mut dbase = vec![0.0; bv.len()];
                    for (j, (&x, &gi)) in bv.data().iter().zip(g.data()).enumerate() {
                        // zero base contributes nothing to either gradient
                        if x > 0.0 {
                            dbase[j] = gi * p * x.powf(p - 1.0);
                            dexp += gi * y.data()[j] * x.ln();
                        }
                    }
                    accumulate(&mut grads, *exponent, Tensor::full(self.val(*exponent).shape(), dexp));
                    accumulate(&mut grads, *base, Tensor::new(bv.shape().to_vec(), dbase)?);
                }
                Op::Clip { a, lo, hi } => {
                    let (lo, hi) = (*lo, *hi);
                    let da = g.zip_map(self.val(*a), "clip", |gi, x| if x >= lo && x <= hi { gi } else { 0.0 })?;
                    accumulate(&mut grads, *a, da);
                }
                Op::CircularConv { signal, kernel } => {
                    let w = self.val(*signal);
                    let s = self.val(*kernel);
                    let n = w.len();
                    let half = (s.len() / 2) as isize;
                    let mut dw = vec![0.0; n];
                    let mut ds = vec![0.0; s.len()];
                    for (k, &sk) in s.data().iter().enumerate() {
                        let offset = k as isize - half;
                        for (i, &gi) in g.data().iter().enumerate() {
                            let j = circular_index(i, offset, n);
                            dw[j] += gi * sk;
                            ds[k] += gi * w.data()[j];
                        }
                    }
                    accumulate(&mut grads, *signal, Tensor::vector(dw));
                    accumulate(&mut grads, *kernel, Tensor::vector(ds));
                }
                Op::L2Norm { a, axis } => {
                    let src = self.val(*a);
                    let mut data = vec![0.0; src.len()];
                    match axis {
                        None => {
                            let norm = y.data()[0];
                            if norm > 0.0 {
                                let scale = g.data()[0] / norm;
                                for (o, &x) in data.iter_mut().zip(src.data()) {
                                    *o = x * scale;
                                }
                            }
                        }
                        Some(ax) => {
                            let (outer, dim, inner) = src.axis_extents(*ax, "l2_norm")?;
                            for o in 0..outer {
                                for i in 0..inner {
                                    let norm = y.data()[o * inner + i];
                                    if norm <= 0.0 {
                                        continue;
                                    }
                                    let scale = g.data()[o * inner + i] / norm;
                                    for d in 0..dim {
                                        let at = (o * dim + d) * inner + i;
                                        data[at] = src.data()[at] * scale;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *a, Tensor::new(src.shape().to_vec(), data)?);
                }
                Op::BceWithLogits { logits, targets } => {
                    let z = self.val(*logits);
                    let data = z
                        .data()
                        .iter()
                        .zip(targets.data())
                        .zip(g.data())
                        .map(|((&zi, &yi), &gi)| gi * (sigmoid(zi) - yi))
                        .collect();
                    accumulate(&mut grads, *logits, Tensor::new(z.shape().to_vec(), data)?);
                }
            }
        }

        for (&id, &index) in &self.params {
            out.map
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.nodes[index].value.shape()));
        }
        Ok(out)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn accumulate(grads: &mut [Option<Tensor>], index: usize, g: Tensor) {
    match &mut grads[index] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(data: &[f64]) -> Tensor {
        Tensor::vector(data.to_vec())
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softplus_at_zero_is_ln2() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.softplus(x).unwrap();
        assert_abs_diff_eq!(tape.value(y).unwrap().data()[0], 2f64.ln(), epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(y).unwrap().data()[0], 0.693147, epsilon = 1e-6);
    }

    #[test]
    fn softplus_does_not_overflow() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[1000.0, -1000.0]));
        let y = tape.softplus(x).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[1000.0, 0.0]);
    }

    #[test]
    fn identity_matmul_returns_operand() {
        let mut tape = Tape::new();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let a = Tensor::new(vec![3, 2], vec![1.5, -2.0, 0.25, 7.0, -3.0, 4.0]).unwrap();
        let i = tape.constant(eye);
        let av = tape.constant(a.clone());
        let out = tape.matmul(i, av).unwrap();
        assert_eq!(tape.value(out).unwrap(), &a);
    }

    #[test]
    fn matmul_rank_one_operands() {
        let mut tape = Tape::new();
        let m = tape.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let x = tape.constant(v(&[1., 0., -1.]));
        let y = tape.constant(v(&[1., 1.]));
        let mx = tape.matmul(m, x).unwrap();
        assert_eq!(tape.value(mx).unwrap(), &v(&[-2., -2.]));
        let ym = tape.matmul(y, m).unwrap();
        assert_eq!(tape.value(ym).unwrap(), &v(&[5., 7., 9.]));
        let dot = tape.matmul(x, x).unwrap();
        assert_eq!(tape.value(dot).unwrap().shape(), &[] as &[usize]);
        assert_eq!(tape.value(dot).unwrap().data(), &[2.0]);
    }

    #[test]
    fn power_squares_elements() {
        let mut tape = Tape::new();
        let x = tape.constant(v(&[0.8, 0.2]));
        let p = tape.constant(Tensor::scalar(2.0));
        let y = tape.power(x, p).unwrap();
        let out = tape.value(y).unwrap().data();
        assert_abs_diff_eq!(out[0], 0.64, epsilon = 1e-15);
        assert_abs_diff_eq!(out[1], 0.04, epsilon = 1e-15);
    }

    #[test]
    fn power_gradient_at_zero_base_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &v(&[0.0, 1.0]));
        let p = tape.param(ParamId(1), &Tensor::scalar(2.5));
        let y = tape.power(x, p).unwrap();
        let s = tape.sum(y, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0.0, 2.5]);
        assert!(g.get(ParamId(1)).unwrap().all_finite());
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let err = tape.add(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "add",
                lhs: vec![2],
                rhs: vec![3]
            }
        );
        assert!(err.to_string().contains("add"));
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(3), &Tensor::new(vec![2, 2], vec![1., -2., 3., 0.5]).unwrap());
        let s = tape.sum(p, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(3)).unwrap(), &Tensor::ones(&[2, 2]));
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &v(&[1., 2., 3.]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[2., 4., 6.]);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &v(&[1., 2.]));
        let _unused = tape.param(ParamId(1), &Tensor::zeros(&[2, 3]));
        let s = tape.sum(p, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(1)).unwrap(), &Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_foreign_nodes() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &v(&[1., 2.]));
        assert!(matches!(tape.backward(p), Err(TensorError::NonScalarLoss { .. })));

        let mut other = Tape::new();
        let q = other.constant(Tensor::scalar(1.0));
        assert_eq!(tape.backward(q).unwrap_err(), TensorError::DetachedNode);
    }

    #[test]
    fn clip_bounds_and_passthrough() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(0), &v(&[-5., -1., 0., 1., 5.]));
        let c = tape.clip(p, -1.0, 1.0).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[-1., -1., 0., 1., 1.]);
        let s = tape.sum(c, None).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[0., 1., 1., 1., 0.]);
    }

    #[test]
    fn one_hot_kernel_at_zero_offset_is_identity() {
        let mut tape = Tape::new();
        let w = tape.constant(v(&[0.1, 0.2, 0.3, 0.4]));
        let k = tape.constant(v(&[0., 1., 0.]));
        let y = tape.circular_convolve(w, k).unwrap();
        assert_eq!(tape.value(y).unwrap().data(), &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn concat_and_slice_along_axes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::new(vec![2, 1], vec![1., 2.]).unwrap());
        let b = tape.constant(Tensor::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.value(c).unwrap().data(), &[1., 3., 4., 2., 5., 6.]);
        let s = tape.slice(c, 1, 1, 2).unwrap();
        assert_eq!(tape.value(s).unwrap(), &Tensor::new(vec![2, 2], vec![3., 4., 5., 6.]).unwrap());
        assert!(tape.slice(c, 1, 2, 2).is_err());
        assert!(tape.concat(&[a, b], 0).is_err());
    }

    #[test]
    fn repeated_param_registration_reuses_node() {
        let mut tape = Tape::new();
        let t = v(&[1.0]);
        let a = tape.param(ParamId(0), &t);
        let b = tape.param(ParamId(0), &t);
        assert_eq!(a, b);
        assert_eq!(tape.len(), 1);
    }
}
