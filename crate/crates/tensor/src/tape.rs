//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs
//! it was computed from. `backward` walks the tape from the loss towards the
//! leaves exactly once, accumulating vector-Jacobian products.

use std::collections::HashMap;

use crate::kernels::{self, dot};
use crate::params::Grads;
use crate::real::Real;
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Bmm(Var, Var),
    BmmNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    Silu(Var),
    Exp(Var),
    RmsNorm {
        x: Var,
        gain: Var,
        inv_rms: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    },
    CausalSoftmax {
        x: Var,
        scale: T,
    },
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    StraightThrough(Var),
    Sum(Var),
    SumSquares(Var),
    RowSumSquares(Var),
    DotConst {
        x: Var,
        w: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        coef: Vec<T>,
        probs: Vec<T>,
    },
    LogSoftmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    visits: Vec<u32>,
    bound: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
    stops: Vec<Tensor<T>>,
    frozen_stops: Option<Vec<Tensor<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            visits: Vec::new(),
            bound: HashMap::new(),
            trainable: Vec::new(),
            stops: Vec::new(),
            frozen_stops: None,
        }
    }

    /// A tape whose `stop_gradient` outputs replay `values` in call order.
    ///
    /// Used by finite-difference oracles: perturbing the inputs of a graph
    /// must not move values that the analytic gradient treats as constant.
    pub fn with_frozen_stops(values: Vec<Tensor<T>>) -> Self {
        let mut t = Self::new();
        t.frozen_stops = Some(values);
        t
    }

    /// Values produced by every `stop_gradient` call so far, in order.
    pub fn stopped_values(&self) -> &[Tensor<T>] {
        &self.stops
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives gradients.
    pub fn var(&mut self, value: Tensor<T>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Binds a named parameter once per tape; later calls return the same node.
    pub fn param(&mut self, name: &str, value: &Tensor<T>, trainable: bool) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let v = self.push(value.clone(), trainable, Op::Leaf);
        self.bound.insert(name.to_string(), v);
        if trainable {
            self.trainable.push((name.to_string(), v));
        }
        v
    }

    /// Registers an existing node under a parameter name, so later
    /// [`Tape::param`] calls with that name resolve to it.
    pub fn alias_param(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// How many times each node's backward rule ran during the last `backward`.
    pub fn backward_visits(&self) -> &[u32] {
        &self.visits
    }

    /// Gradients of every trainable bound parameter, zero-filled where none flowed.
    pub fn named_grads(&self) -> Grads<T> {
        let mut out = Grads::new();
        for (name, v) in &self.trainable {
            let g = match self.grad(*v) {
                Some(g) => Tensor::new(self.shape(*v).to_vec(), g.to_vec())
                    .expect("gradient shape matches value"),
                None => Tensor::zeros(self.shape(*v)),
            };
            out.insert(name.clone(), g);
        }
        out
    }

    // ---- operations -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMul(a, b)))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(shape_err("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, rg, Op::MatMulNT(a, b)))
    }

    /// Batched `[b,m,k] · [b,k,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bt * m * n];
        for (i, o) in out.chunks_mut(m * n).enumerate() {
            kernels::matmul_nn_acc(&ad[i * m * k..][..m * k], &bd[i * k * n..][..k * n], o, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, rg, Op::Bmm(a, b)))
    }

    /// Batched `[b,m,k] · [b,n,k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(shape_err("bmm_nt", sa, sb));
        }
        let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); bt * m * n];
        for (i, o) in out.chunks_mut(m * n).enumerate() {
            kernels::matmul_nt_acc(&ad[i * m * k..][..m * k], &bd[i * n * k..][..n * k], o, m, k, n);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![bt, m, n], out)?, rg, Op::BmmNT(a, b)))
    }

    fn zip(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i] * c);
        let rg = self.rg(a);
        self.push(t, rg, Op::Scale(a, c))
    }

    /// Adds a `[n]` bias to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.value(bias).len() != n {
            return Err(shape_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data();
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i] + b[i % n]);
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(t, rg, Op::AddBias(x, bias)))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| {
            let z = v.data()[i];
            z / (T::one() + (-z).exp())
        });
        let rg = self.rg(x);
        self.push(t, rg, Op::Silu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let t = Tensor::from_fn(v.shape(), |i| v.data()[i].exp());
        let rg = self.rg(x);
        self.push(t, rg, Op::Exp(x))
    }

    /// Root-mean-square normalization of each row with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: T) -> Result<Var, TensorError> {
        let n = self.value(x).cols();
        if self.value(gain).len() != n {
            return Err(shape_err("rms_norm", self.shape(x), self.shape(gain)));
        }
        let v = self.value(x);
        let g = self.value(gain).data();
        let rows = v.len() / n;
        let mut inv_rms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); v.len()];
        let nf = T::of(n as f64);
        for r in 0..rows {
            let row = &v.data()[r * n..(r + 1) * n];
            let ms = dot(row, row) / nf;
            let ir = T::one() / (ms + eps).sqrt();
            inv_rms.push(ir);
            for j in 0..n {
                out[r * n + j] = row[j] * ir * g[j];
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x) || self.rg(gain);
        Ok(self.push(t, rg, Op::RmsNorm { x, gain, inv_rms }))
    }

    /// Selects rows of `table: [V, d]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(shape_err("gather_rows", tv.shape(), &[ids.len()]));
        }
        let (rows, d) = (tv.shape()[0], tv.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                extent: rows,
            });
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(tv.row(i));
        }
        let t = Tensor::new(vec![ids.len(), d], out)?;
        let rg = self.rg(table);
        Ok(self.push(
            t,
            rg,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// `[batch*seq, heads*dh]` → `[batch*heads, seq, dh]`.
    pub fn split_heads(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        let d = v.cols();
        if v.rows() != batch * seq || heads == 0 || !d.is_multiple_of(heads) {
            return Err(shape_err("split_heads", v.shape(), &[batch, seq, heads]));
        }
        let dh = d / heads;
        let src = v.data();
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            for t in 0..seq {
                let row = &src[(b * seq + t) * d..][..d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * seq + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&row[h * dh..(h + 1) * dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * heads, seq, dh], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::SplitHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Inverse of [`Tape::split_heads`].
    pub fn merge_heads(
        &mut self,
        x: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
            return Err(shape_err("merge_heads", s, &[batch, seq, heads]));
        }
        let dh = s[2];
        let d = dh * heads;
        let src = v.data();
        let mut out = vec![T::zero(); v.len()];
        for b in 0..batch {
            for h in 0..heads {
                for t in 0..seq {
                    let from = ((b * heads + h) * seq + t) * dh;
                    let to = (b * seq + t) * d + h * dh;
                    out[to..to + dh].copy_from_slice(&src[from..from + dh]);
                }
            }
        }
        let t = Tensor::new(vec![batch * seq, d], out)?;
        let rg = self.rg(x);
        Ok(self.push(
            t,
            rg,
            Op::MergeHeads {
                x,
                batch,
                seq,
                heads,
            },
        ))
    }

    /// Row softmax of `scale · x` over `[b, t, t]` score blocks, masking `j > i`.
    pub fn causal_softmax(&mut self, x: Var, scale: T) -> Result<Var, TensorError> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(shape_err("causal_softmax", s, s));
        }
        let t = s[1];
        let mut out = vec![T::zero(); v.len()];
        for (blk, o) in v.data().chunks(t * t).zip(out.chunks_mut(t * t)) {
            for i in 0..t {
                let row = &blk[i * t..i * t + i + 1];
                let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z * scale));
                let mut z = T::zero();
                for j in 0..=i {
                    let e = (row[j] * scale - mx).exp();
                    o[i * t + j] = e;
                    z += e;
                }
                for j in 0..=i {
                    o[i * t + j] /= z;
                }
            }
        }
        let out = Tensor::new(s.to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::CausalSoftmax { x, scale }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.rows() != vb.rows() {
            return Err(shape_err("concat_cols", va.shape(), vb.shape()));
        }
        let (m, p, q) = (va.rows(), va.cols(), vb.cols());
        let mut out = Vec::with_capacity(m * (p + q));
        for r in 0..m {
            out.extend_from_slice(va.row(r));
            out.extend_from_slice(vb.row(r));
        }
        let t = Tensor::new(vec![m, p + q], out)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, rg, Op::ConcatCols(a, b)))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.shape().len() != 2 || start + len > v.rows() {
            return Err(shape_err("slice_rows", v.shape(), &[start, len]));
        }
        let n = v.cols();
        let data = v.data()[start * n..(start + len) * n].to_vec();
        let t = Tensor::new(vec![len, n], data)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::SliceRows { x, start }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    /// Same values; contributes nothing to the gradient of `x`.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let k = self.stops.len();
        let t = match &self.frozen_stops {
            Some(f) if k < f.len() && f[k].shape() == self.shape(x) => f[k].clone(),
            _ => self.value(x).clone(),
        };
        self.stops.push(t.clone());
        self.push(t, false, Op::Leaf)
    }

    /// Forward value of `target`, gradient passed to `x` unchanged. The
    /// offset `target − x` is logged like a stop-gradient so finite-difference
    /// replays see `x + offset`.
    pub fn straight_through(&mut self, x: Var, target: Var) -> Result<Var, TensorError> {
        if self.shape(x) != self.shape(target) {
            return Err(shape_err("straight_through", self.shape(x), self.shape(target)));
        }
        let vx = self.value(x);
        let vt = self.value(target);
        let offset = Tensor::new(
            vx.shape().to_vec(),
            vt.data().iter().zip(vx.data()).map(|(&c, &e)| c - e).collect(),
        )?;
        let k = self.stops.len();
        let value = match &self.frozen_stops {
            Some(f) if k < f.len() && f[k].shape() == vx.shape() => Tensor::new(
                vx.shape().to_vec(),
                vx.data().iter().zip(f[k].data()).map(|(&e, &d)| e + d).collect(),
            )?,
            _ => vt.clone(),
        };
        self.stops.push(offset);
        let rg = self.rg(x);
        Ok(self.push(value, rg, Op::StraightThrough(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::of(n as f64))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let d = self.value(x).data();
        let s = dot(d, d);
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::SumSquares(x))
    }

    /// Squared L2 norm of each row: `[m, n]` → `[m]`.
    pub fn row_sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let out: Vec<T> = v.data().chunks(n.max(1)).map(|r| dot(r, r)).collect();
        let m = out.len();
        let rg = self.rg(x);
        self.push(Tensor::new(vec![m], out).expect("row count"), rg, Op::RowSumSquares(x))
    }

    /// `Σ x_i w_i` with constant weights.
    pub fn dot_const(&mut self, x: Var, w: &[T]) -> Result<Var, TensorError> {
        let v = self.value(x);
        if v.len() != w.len() {
            return Err(shape_err("dot_const", v.shape(), &[w.len()]));
        }
        let s = dot(v.data(), w);
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), rg, Op::DotConst { x, w: w.to_vec() }))
    }

    /// Mask-weighted mean of `-log softmax(logits)[target]` over rows.
    ///
    /// Rows with zero weight are ignored; an all-zero mask yields 0.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: &[T],
    ) -> Result<Var, TensorError> {
        if let Some(&w) = mask.iter().find(|&&w| w < T::zero()) {
            return Err(TensorError::NonFinite(format!(
                "softmax_cross_entropy: negative mask weight {w}"
            )));
        }
        let total: T = mask.iter().copied().sum();
        let coef: Vec<T> = if total > T::zero() {
            mask.iter().map(|&w| w / total).collect()
        } else {
            vec![T::zero(); mask.len()]
        };
        self.cross_entropy(logits, targets, coef)
    }

    /// `Σ_i w_i · -log softmax(logits_i)[target_i]` with arbitrary-sign weights.
    pub fn weighted_nll(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
    ) -> Result<Var, TensorError> {
        self.cross_entropy(logits, targets, weights.to_vec())
    }

    fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        coef: Vec<T>,
    ) -> Result<Var, TensorError> {
        let v = self.value(logits);
        if v.shape().len() != 2 || v.rows() != targets.len() || coef.len() != targets.len() {
            return Err(shape_err("cross_entropy", v.shape(), &[targets.len(), coef.len()]));
        }
        let n = v.cols();
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(TensorError::Index {
                op: "cross_entropy",
                index: bad,
                extent: n,
            });
        }
        let mut probs = vec![T::zero(); v.len()];
        let mut loss = T::zero();
        for (r, (&tgt, &c)) in targets.iter().zip(&coef).enumerate() {
            let row = v.row(r);
            let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let mut z = T::zero();
            let p = &mut probs[r * n..(r + 1) * n];
            for (pj, &l) in p.iter_mut().zip(row) {
                *pj = (l - mx).exp();
                z += *pj;
            }
            for pj in p.iter_mut() {
                *pj /= z;
            }
            if c != T::zero() {
                let nll = z.ln() + mx - row[tgt];
                loss += c * nll;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                coef,
                probs,
            },
        ))
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.cols();
        let mut out = vec![T::zero(); v.len()];
        for (row, o) in v.data().chunks(n).zip(out.chunks_mut(n)) {
            let mx = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let lse = row.iter().map(|&z| (z - mx).exp()).sum::<T>().ln() + mx;
            for (oj, &z) in o.iter_mut().zip(row) {
                *oj = z - lse;
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.rg(x);
        self.push(t, rg, Op::LogSoftmax(x))
    }

    // ---- backward ---------------------------------------------------------

    /// Back-propagates from a scalar `loss`, replacing any previous gradients.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(shape_err("backward", self.shape(loss), &[1]));
        }
        let n = self.nodes.len();
        self.grads = (0..n).map(|_| None).collect();
        self.visits = vec![0; n];
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let (lo, hi) = self.grads.split_at_mut(i);
            let Some(g) = hi[0].as_deref() else { continue };
            self.visits[i] += 1;
            backprop_node(&self.nodes, i, g, lo);
        }
        for (i, g) in self.grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(TensorError::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        Ok(())
    }
}

fn acc<'a, T: Real>(
    nodes: &[Node<T>],
    grads: &'a mut [Option<Vec<T>>],
    v: Var,
) -> Option<&'a mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn backprop_node<T: Real>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let node = &nodes[i];
    let val = |v: Var| &nodes[v.0].value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                kernels::matmul_tn_acc(val(*a).data(), g, gb, m, k, n);
            }
        }
        Op::MatMulNT(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (m, k, n) = (sa[0], sa[1], sb[0]);
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::matmul_nn_acc(g, val(*b).data(), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                kernels::matmul_tn_acc(g, val(*a).data(), gb, m, n, k);
            }
        }
        Op::Bmm(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
            if let Some(ga) = acc(nodes, grads, *a) {
                let bd = val(*b).data();
                for x in 0..bt {
                    kernels::matmul_nt_acc(
                        &g[x * m * n..][..m * n],
                        &bd[x * k * n..][..k * n],
                        &mut ga[x * m * k..][..m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let ad = val(*a).data();
                for x in 0..bt {
                    kernels::matmul_tn_acc(
                        &ad[x * m * k..][..m * k],
                        &g[x * m * n..][..m * n],
                        &mut gb[x * k * n..][..k * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        Op::BmmNT(a, b) => {
            let (sa, sb) = (val(*a).shape(), val(*b).shape());
            let (bt, m, k, n) = (sa[0], sa[1], sa[2], sb[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                let bd = val(*b).data();
                for x in 0..bt {
                    kernels::matmul_nn_acc(
                        &g[x * m * n..][..m * n],
                        &bd[x * n * k..][..n * k],
                        &mut ga[x * m * k..][..m * k],
                        m,
                        n,
                        k,
                    );
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let ad = val(*a).data();
                for x in 0..bt {
                    kernels::matmul_tn_acc(
                        &g[x * m * n..][..m * n],
                        &ad[x * m * k..][..m * k],
                        &mut gb[x * n * k..][..n * k],
                        m,
                        n,
                        k,
                    );
                }
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                let bv = val(*b).data();
                for ((x, &y), &z) in ga.iter_mut().zip(g).zip(bv) {
                    *x += y * z;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let av = val(*a).data();
                for ((x, &y), &z) in gb.iter_mut().zip(g).zip(av) {
                    *x += y * z;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let n = gb.len();
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(p, &q)| *p += q);
                }
            }
        }
        Op::Silu(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let xv = val(*x).data();
                for ((p, &q), &z) in gx.iter_mut().zip(g).zip(xv) {
                    let s = T::one() / (T::one() + (-z).exp());
                    *p += q * s * (T::one() + z * (T::one() - s));
                }
            }
        }
        Op::Exp(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let y = node.value.data();
                for ((p, &q), &e) in gx.iter_mut().zip(g).zip(y) {
                    *p += q * e;
                }
            }
        }
        Op::RmsNorm { x, gain, inv_rms } => {
            let xv = val(*x);
            let n = xv.cols();
            let gv = val(*gain).data();
            let nf = T::of(n as f64);
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let row = xv.row(r);
                    for j in 0..n {
                        gg[j] += g[r * n + j] * row[j] * ir;
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for (r, &ir) in inv_rms.iter().enumerate() {
                    let row = xv.row(r);
                    let dy = &g[r * n..(r + 1) * n];
                    let mut s = T::zero();
                    for j in 0..n {
                        s += dy[j] * gv[j] * row[j] * ir;
                    }
                    s /= nf;
                    for j in 0..n {
                        gx[r * n + j] += ir * (dy[j] * gv[j] - row[j] * ir * s);
                    }
                }
            }
        }
        Op::GatherRows { table, ids } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = val(*table).cols();
                for (r, &id) in ids.iter().enumerate() {
                    let src = &g[r * d..(r + 1) * d];
                    gt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(p, &q)| *p += q);
                }
            }
        }
        Op::SplitHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let d = val(*x).cols();
                let dh = d / heads;
                for b in 0..*batch {
                    for t in 0..*seq {
                        for h in 0..*heads {
                            let from = ((b * heads + h) * seq + t) * dh;
                            let to = (b * seq + t) * d + h * dh;
                            gx[to..to + dh]
                                .iter_mut()
                                .zip(&g[from..from + dh])
                                .for_each(|(p, &q)| *p += q);
                        }
                    }
                }
            }
        }
        Op::MergeHeads {
            x,
            batch,
            seq,
            heads,
        } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let dh = val(*x).shape()[2];
                let d = dh * heads;
                for b in 0..*batch {
                    for h in 0..*heads {
                        for t in 0..*seq {
                            let to = ((b * heads + h) * seq + t) * dh;
                            let from = (b * seq + t) * d + h * dh;
                            gx[to..to + dh]
                                .iter_mut()
                                .zip(&g[from..from + dh])
                                .for_each(|(p, &q)| *p += q);
                        }
                    }
                }
            }
        }
        Op::CausalSoftmax { x, scale } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let t = val(*x).shape()[1];
                let y = node.value.data();
                for blk in 0..y.len() / (t * t) {
                    for i in 0..t {
                        let base = blk * t * t + i * t;
                        let yr = &y[base..base + i + 1];
                        let gr = &g[base..base + i + 1];
                        let s = dot(yr, gr);
                        for j in 0..=i {
                            gx[base + j] += *scale * yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
        }
        Op::ConcatCols(a, b) => {
            let (p, q) = (val(*a).cols(), val(*b).cols());
            let w = p + q;
            if let Some(ga) = acc(nodes, grads, *a) {
                for (r, row) in g.chunks(w).enumerate() {
                    ga[r * p..(r + 1) * p]
                        .iter_mut()
                        .zip(&row[..p])
                        .for_each(|(x, &y)| *x += y);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (r, row) in g.chunks(w).enumerate() {
                    gb[r * q..(r + 1) * q]
                        .iter_mut()
                        .zip(&row[p..])
                        .for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::SliceRows { x, start } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let n = val(*x).cols();
                gx[start * n..start * n + g.len()]
                    .iter_mut()
                    .zip(g)
                    .for_each(|(p, &q)| *p += q);
            }
        }
        Op::Reshape(x) | Op::StraightThrough(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q);
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|p| *p += g[0]);
            }
        }
        Op::SumSquares(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let xv = val(*x).data();
                let two = T::of(2.0);
                for (p, &z) in gx.iter_mut().zip(xv) {
                    *p += two * z * g[0];
                }
            }
        }
        Op::RowSumSquares(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let xv = val(*x);
                let n = xv.cols();
                let two = T::of(2.0);
                for (r, &gr) in g.iter().enumerate() {
                    for j in 0..n {
                        gx[r * n + j] += two * xv.data()[r * n + j] * gr;
                    }
                }
            }
        }
        Op::DotConst { x, w } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (p, &wi) in gx.iter_mut().zip(w) {
                    *p += wi * g[0];
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            coef,
            probs,
        } => {
            if let Some(gl) = acc(nodes, grads, *logits) {
                let n = val(*logits).cols();
                for (r, (&tgt, &c)) in targets.iter().zip(coef).enumerate() {
                    if c == T::zero() {
                        continue;
                    }
                    let s = c * g[0];
                    let p = &probs[r * n..(r + 1) * n];
                    let gr = &mut gl[r * n..(r + 1) * n];
                    for (q, &pj) in gr.iter_mut().zip(p) {
                        *q += s * pj;
                    }
                    gr[tgt] -= s;
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let y = node.value.data();
                let n = node.value.cols();
                for r in 0..y.len() / n {
                    let gr = &g[r * n..(r + 1) * n];
                    let s: T = gr.iter().copied().sum();
                    for j in 0..n {
                        gx[r * n + j] += gr[j] - y[r * n + j].exp() * s;
                    }
                }
            }
        }
    }
}
