//! Pre-norm causal transformer block and affine helpers.

use crate::params::ParamStore;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, TensorError};

pub const RMS_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockDims {
    pub d_model: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_context: usize,
}

/// Binds parameters of one model onto a tape.
pub struct Binder<'a, T: Real> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Real> Binder<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self { store, trainable }
    }

    pub fn get(&self, tape: &mut Tape<T>, name: &str) -> Var {
        tape.param(name, self.store.expect(name), self.trainable)
    }
}

/// Fills a tensor with N(0, std²) draws from `normal`.
pub fn gaussian<T: Real>(shape: &[usize], std: f64, normal: &mut dyn FnMut() -> f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(normal() * std))
}

pub fn init_linear<T: Real>(
    store: &mut ParamStore<T>,
    name: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
    normal: &mut dyn FnMut() -> f64,
) {
    store.insert(format!("{name}.w"), gaussian(&[fan_in, fan_out], INIT_STD, normal));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
    }
}

/// `x · W (+ b)`; the bias is used when the store holds `{name}.b`.
pub fn linear<T: Real>(tape: &mut Tape<T>, p: &Binder<'_, T>, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = p.get(tape, &format!("{name}.w"));
    let y = tape.matmul(x, w)?;
    let bname = format!("{name}.b");
    if p.store.get(&bname).is_some() {
        let b = p.get(tape, &bname);
        tape.add_bias(y, b)
    } else {
        Ok(y)
    }
}

pub fn init_norm<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize) {
    store.insert(name.to_string(), Tensor::filled(&[d], T::one()));
}

pub fn rms_norm<T: Real>(tape: &mut Tape<T>, p: &Binder<'_, T>, name: &str, x: Var) -> Result<Var, TensorError> {
    let g = p.get(tape, name);
    tape.rms_norm(x, g, T::of(RMS_EPS))
}

pub fn init_block<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    dims: BlockDims,
    normal: &mut dyn FnMut() -> f64,
) {
    let d = dims.d_model;
    let f = dims.ffn_hidden;
    init_norm(store, &format!("{prefix}.attn_norm"), d);
    for w in ["wq", "wk", "wv", "wo"] {
        init_linear(store, &format!("{prefix}.{w}"), d, d, false, normal);
    }
    init_norm(store, &format!("{prefix}.ffn_norm"), d);
    init_linear(store, &format!("{prefix}.w_gate"), d, f, false, normal);
    init_linear(store, &format!("{prefix}.w_up"), d, f, false, normal);
    init_linear(store, &format!("{prefix}.w_down"), f, d, false, normal);
}

/// One pre-norm block over `batch` sequences of length `seq` stacked as `[batch*seq, d]`.
///
/// Multi-head causal self-attention followed by a gated SiLU feed-forward
/// layer, each wrapped in a residual connection. Row `i` of a sequence
/// only reads rows `≤ i` of the same sequence.
pub fn causal_self_attention_block<T: Real>(
    tape: &mut Tape<T>,
    p: &Binder<'_, T>,
    prefix: &str,
    dims: BlockDims,
    x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var, TensorError> {
    if seq > dims.max_context {
        return Err(TensorError::ContextLength {
            len: seq,
            max: dims.max_context,
        });
    }
    let h = rms_norm(tape, p, &format!("{prefix}.attn_norm"), x)?;
    let q = linear(tape, p, &format!("{prefix}.wq"), h)?;
    let k = linear(tape, p, &format!("{prefix}.wk"), h)?;
    let v = linear(tape, p, &format!("{prefix}.wv"), h)?;
    let heads = dims.n_heads;
    let qh = tape.split_heads(q, batch, seq, heads)?;
    let kh = tape.split_heads(k, batch, seq, heads)?;
    let vh = tape.split_heads(v, batch, seq, heads)?;
    let scores = tape.bmm_nt(qh, kh)?;
    let dh = dims.d_model / heads;
    let probs = tape.causal_softmax(scores, T::of(1.0 / (dh as f64).sqrt()))?;
    let ctx = tape.bmm(probs, vh)?;
    let ctx = tape.merge_heads(ctx, batch, seq, heads)?;
    let attn = linear(tape, p, &format!("{prefix}.wo"), ctx)?;
    let x = tape.add(x, attn)?;

    let h = rms_norm(tape, p, &format!("{prefix}.ffn_norm"), x)?;
    let gate = linear(tape, p, &format!("{prefix}.w_gate"), h)?;
    let gate = tape.silu(gate);
    let up = linear(tape, p, &format!("{prefix}.w_up"), h)?;
    let hidden = tape.mul(gate, up)?;
    let ffn = linear(tape, p, &format!("{prefix}.w_down"), hidden)?;
    tape.add(x, ffn)
}
