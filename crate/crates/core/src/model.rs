//! The language world model, the inverse dynamics VQ-VAE, the cognitive
//! policy and a depth-matched autoregressive baseline.
//!
//! Every network embeds tokens with learned absolute positions and runs a
//! stack of causal pre-norm blocks. Sequences are passed as `batch` rows of
//! `seq` token ids flattened row-major; activations are `[batch*seq, d]`.

use bwarea_tensor::nn::{self, Binder, BlockDims, INIT_STD};
use bwarea_tensor::{ParamStore, Real, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_code: usize,
    pub n_codes: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub max_context: usize,
    pub ctx_layers: usize,
    pub dyn_layers: usize,
    pub inv_layers: usize,
    pub policy_layers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::data::Vocabulary::byte_level().size,
            d_model: 128,
            d_code: 16,
            n_codes: 64,
            n_heads: 4,
            ffn_hidden: 256,
            max_context: 256,
            ctx_layers: 2,
            dyn_layers: 2,
            inv_layers: 2,
            policy_layers: 4,
        }
    }
}

impl ModelConfig {
    /// Narrow variant used for fast experiments; depth and codebook as default.
    pub fn compact() -> Self {
        Self {
            d_model: 48,
            n_heads: 4,
            ffn_hidden: 96,
            max_context: 128,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CoreError::Config(m.to_string()));
        if self.ctx_layers != self.dyn_layers {
            return fail("context and dynamics stacks must have equal depth");
        }
        if self.n_codes < 2 {
            return fail("codebook needs at least two codes");
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail("d_model must be a positive multiple of n_heads");
        }
        if self.vocab_size == 0 || self.d_code == 0 || self.ffn_hidden == 0 || self.max_context == 0 {
            return fail("dimensions must be positive");
        }
        Ok(())
    }

    pub fn block_dims(&self) -> BlockDims {
        BlockDims {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ffn_hidden: self.ffn_hidden,
            max_context: self.max_context,
        }
    }
}

/// The four parameter sets: `world.*`, `inverse.*`, `policy.*`, `baseline.*`.
#[derive(Clone, Debug, PartialEq)]
pub struct Models<T> {
    pub config: ModelConfig,
    pub world: ParamStore<T>,
    pub inverse: ParamStore<T>,
    pub policy: ParamStore<T>,
    pub baseline: ParamStore<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    World,
    Inverse,
    Policy,
    Baseline,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::World, ModelKind::Inverse, ModelKind::Policy, ModelKind::Baseline];

    pub fn prefix(self) -> &'static str {
        match self {
            ModelKind::World => "world",
            ModelKind::Inverse => "inverse",
            ModelKind::Policy => "policy",
            ModelKind::Baseline => "baseline",
        }
    }
}

fn init_trunk<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cfg: &ModelConfig,
    normal: &mut dyn FnMut() -> f64,
) {
    store.insert(
        format!("{prefix}.tok_emb"),
        nn::gaussian(&[cfg.vocab_size, cfg.d_model], INIT_STD, normal),
    );
    store.insert(
        format!("{prefix}.pos_emb"),
        nn::gaussian(&[cfg.max_context, cfg.d_model], INIT_STD, normal),
    );
}

fn init_stack<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    layers: usize,
    cfg: &ModelConfig,
    normal: &mut dyn FnMut() -> f64,
) {
    for i in 0..layers {
        nn::init_block(store, &format!("{prefix}.{i}"), cfg.block_dims(), normal);
    }
}

impl<T: Real> Models<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
        let c = &config;

        let mut world = ParamStore::new();
        init_trunk(&mut world, "world", c, &mut normal);
        init_stack(&mut world, "world.ctx", c.ctx_layers, c, &mut normal);
        nn::init_linear(&mut world, "world.action", c.d_code, c.d_model, true, &mut normal);
        nn::init_linear(&mut world, "world.agg", 2 * c.d_model, c.d_model, true, &mut normal);
        init_stack(&mut world, "world.dyn", c.dyn_layers, c, &mut normal);
        nn::init_norm(&mut world, "world.norm", c.d_model);
        nn::init_linear(&mut world, "world.head", c.d_model, c.vocab_size, false, &mut normal);

        let mut inverse = ParamStore::new();
        init_trunk(&mut inverse, "inverse", c, &mut normal);
        init_stack(&mut inverse, "inverse.blk", c.inv_layers, c, &mut normal);
        nn::init_norm(&mut inverse, "inverse.norm", c.d_model);
        nn::init_linear(&mut inverse, "inverse.compress", c.d_model, c.d_code, true, &mut normal);

        let mut policy = ParamStore::new();
        init_trunk(&mut policy, "policy", c, &mut normal);
        init_stack(&mut policy, "policy.blk", c.policy_layers, c, &mut normal);
        nn::init_norm(&mut policy, "policy.norm", c.d_model);
        nn::init_linear(&mut policy, "policy.head", c.d_model, c.n_codes, true, &mut normal);

        let mut baseline = ParamStore::new();
        init_trunk(&mut baseline, "baseline", c, &mut normal);
        init_stack(&mut baseline, "baseline.blk", c.ctx_layers + c.dyn_layers, c, &mut normal);
        nn::init_norm(&mut baseline, "baseline.norm", c.d_model);
        nn::init_linear(&mut baseline, "baseline.head", c.d_model, c.vocab_size, false, &mut normal);

        let bound = 1.0 / c.n_codes as f64;
        let uni = Uniform::new_inclusive(-bound, bound);
        let codebook = Tensor::from_fn(&[c.n_codes, c.d_code], |_| T::of(uni.sample(&mut rng)));
        inverse.insert("inverse.codebook", codebook);

        Ok(Self {
            config,
            world,
            inverse,
            policy,
            baseline,
        })
    }

    pub fn store(&self, kind: ModelKind) -> &ParamStore<T> {
        match kind {
            ModelKind::World => &self.world,
            ModelKind::Inverse => &self.inverse,
            ModelKind::Policy => &self.policy,
            ModelKind::Baseline => &self.baseline,
        }
    }

    pub fn store_mut(&mut self, kind: ModelKind) -> &mut ParamStore<T> {
        match kind {
            ModelKind::World => &mut self.world,
            ModelKind::Inverse => &mut self.inverse,
            ModelKind::Policy => &mut self.policy,
            ModelKind::Baseline => &mut self.baseline,
        }
    }

    pub fn codebook(&self) -> &Tensor<T> {
        self.inverse.expect("inverse.codebook")
    }

    pub fn cast<U: Real>(&self) -> Models<U> {
        Models {
            config: self.config,
            world: self.world.cast(),
            inverse: self.inverse.cast(),
            policy: self.policy.cast(),
            baseline: self.baseline.cast(),
        }
    }

    /// All four stores merged into one, for oracles that perturb across models.
    pub fn merged(&self) -> ParamStore<T> {
        let mut all = ParamStore::new();
        for kind in ModelKind::ALL {
            for (k, v) in self.store(kind).iter() {
                all.insert(k.clone(), v.clone());
            }
        }
        all
    }
}

fn check_tokens(cfg: &ModelConfig, tokens: &[usize], batch: usize, seq: usize) -> Result<()> {
    if tokens.len() != batch * seq {
        return Err(CoreError::contract(format!(
            "{} tokens do not form {batch} rows of {seq}",
            tokens.len()
        )));
    }
    if let Some(&id) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(CoreError::TokenRange {
            id,
            size: cfg.vocab_size,
        });
    }
    if seq > cfg.max_context {
        return Err(bwarea_tensor::TensorError::ContextLength {
            len: seq,
            max: cfg.max_context,
        }
        .into());
    }
    Ok(())
}

fn embed<T: Real>(
    tape: &mut Tape<T>,
    p: &Binder<'_, T>,
    prefix: &str,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let tok = p.get(tape, &format!("{prefix}.tok_emb"));
    let pos = p.get(tape, &format!("{prefix}.pos_emb"));
    let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
    let t = tape.gather_rows(tok, tokens)?;
    let q = tape.gather_rows(pos, &positions)?;
    Ok(tape.add(t, q)?)
}

fn run_stack<T: Real>(
    tape: &mut Tape<T>,
    p: &Binder<'_, T>,
    prefix: &str,
    layers: usize,
    cfg: &ModelConfig,
    mut x: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    for i in 0..layers {
        x = nn::causal_self_attention_block(tape, p, &format!("{prefix}.{i}"), cfg.block_dims(), x, batch, seq)?;
    }
    Ok(x)
}

fn head<T: Real>(tape: &mut Tape<T>, p: &Binder<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let h = nn::rms_norm(tape, p, &format!("{prefix}.norm"), x)?;
    Ok(nn::linear(tape, p, &format!("{prefix}.head"), h)?)
}

/// Context encoder of the world model: `[batch*seq, d_model]` state embeddings.
pub fn world_context<T: Real>(
    tape: &mut Tape<T>,
    w: &Binder<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    check_tokens(cfg, tokens, batch, seq)?;
    let x = embed(tape, w, "world", tokens, batch, seq)?;
    run_stack(tape, w, "world.ctx", cfg.ctx_layers, cfg, x, batch, seq)
}

/// Action encoder, aggregate and dynamics module on top of encoded context.
/// `actions` holds one `d_code` vector per context row.
pub fn world_decode<T: Real>(
    tape: &mut Tape<T>,
    w: &Binder<'_, T>,
    cfg: &ModelConfig,
    context: Var,
    actions: Var,
    batch: usize,
    seq: usize,
) -> Result<Var> {
    let rows = tape.shape(context)[0];
    let arows = tape.shape(actions)[0];
    if rows != arows || rows != batch * seq {
        return Err(CoreError::contract(format!(
            "world model needs one action per position: {rows} positions, {arows} actions"
        )));
    }
    let a = nn::linear(tape, w, "world.action", actions)?;
    let cat = tape.concat_cols(context, a)?;
    let h = nn::linear(tape, w, "world.agg", cat)?;
    let h = run_stack(tape, w, "world.dyn", cfg.dyn_layers, cfg, h, batch, seq)?;
    head(tape, w, "world", h)
}

/// Codebook rows for a list of action indices.
pub fn code_vectors<T: Real>(
    tape: &mut Tape<T>,
    inv: &Binder<'_, T>,
    cfg: &ModelConfig,
    codes: &[usize],
) -> Result<Var> {
    if let Some(&action) = codes.iter().find(|&&a| a >= cfg.n_codes) {
        return Err(CoreError::ActionRange {
            action,
            size: cfg.n_codes,
        });
    }
    let cb = inv.get(tape, "inverse.codebook");
    Ok(tape.gather_rows(cb, codes)?)
}

/// Next-token logits given tokens and one action index per position.
#[allow(clippy::too_many_arguments)]
pub fn world_logits<T: Real>(
    tape: &mut Tape<T>,
    w: &Binder<'_, T>,
    inv: &Binder<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    codes: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    if codes.len() != tokens.len() {
        return Err(CoreError::contract(format!(
            "{} actions for {} tokens",
            codes.len(),
            tokens.len()
        )));
    }
    let ctx = world_context(tape, w, cfg, tokens, batch, seq)?;
    let a = code_vectors(tape, inv, cfg, codes)?;
    world_decode(tape, w, cfg, ctx, a, batch, seq)
}

/// Hindsight embeddings `e_i` for `i = 0..seq-1` of each row, where `e_i`
/// sees tokens `0..=i+1`. Output is `[batch*(seq-1), d_code]`.
pub fn inverse_embed<T: Real>(
    tape: &mut Tape<T>,
    inv: &Binder<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    check_tokens(cfg, tokens, batch, seq)?;
    let x = embed(tape, inv, "inverse", tokens, batch, seq)?;
    let h = run_stack(tape, inv, "inverse.blk", cfg.inv_layers, cfg, x, batch, seq)?;
    let h = nn::rms_norm(tape, inv, "inverse.norm", h)?;
    let shifted: Vec<usize> = (0..batch).flat_map(|b| (1..seq).map(move |j| b * seq + j)).collect();
    let h = tape.gather_rows(h, &shifted)?;
    Ok(nn::linear(tape, inv, "inverse.compress", h)?)
}

/// Index of the nearest code (squared L2) for each row of `e`; ties go to
/// the lowest index.
pub fn nearest_codes<T: Real>(codebook: &Tensor<T>, e: &Tensor<T>) -> Vec<usize> {
    let n = codebook.rows();
    (0..e.rows())
        .map(|r| {
            let row = e.row(r);
            let mut best = 0;
            let mut best_d = T::infinity();
            for i in 0..n {
                let d: T = codebook
                    .row(i)
                    .iter()
                    .zip(row)
                    .map(|(&c, &x)| (x - c) * (x - c))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            best
        })
        .collect()
}

pub struct Quantized {
    pub indices: Vec<usize>,
    /// The selected codes forward, identity to `e` backward.
    pub straight_through: Var,
    /// Per-row `‖e − sg c‖²`.
    pub commitment: Var,
    /// Per-row `λ_c‖sg e − c‖²`.
    pub codebook: Var,
}

pub fn quantize<T: Real>(tape: &mut Tape<T>, inv: &Binder<'_, T>, e: Var, lambda_c: f64) -> Result<Quantized> {
    let cb = inv.get(tape, "inverse.codebook");
    let indices = nearest_codes(tape.value(cb), tape.value(e));
    let c = tape.gather_rows(cb, &indices)?;
    let straight_through = tape.straight_through(e, c)?;

    let c_sg = tape.stop_gradient(c);
    let d = tape.sub(e, c_sg)?;
    let commitment = tape.row_sum_squares(d);

    let e_sg = tape.stop_gradient(e);
    let d = tape.sub(e_sg, c)?;
    let cb_rows = tape.row_sum_squares(d);
    let codebook = tape.scale(cb_rows, T::of(lambda_c));
    Ok(Quantized {
        indices,
        straight_through,
        commitment,
        codebook,
    })
}

/// Action logits `[batch*seq, n_codes]`; row `i` sees tokens `0..=i` only.
pub fn policy_logits<T: Real>(
    tape: &mut Tape<T>,
    pol: &Binder<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    check_tokens(cfg, tokens, batch, seq)?;
    let x = embed(tape, pol, "policy", tokens, batch, seq)?;
    let h = run_stack(tape, pol, "policy.blk", cfg.policy_layers, cfg, x, batch, seq)?;
    head(tape, pol, "policy", h)
}

pub fn baseline_logits<T: Real>(
    tape: &mut Tape<T>,
    base: &Binder<'_, T>,
    cfg: &ModelConfig,
    tokens: &[usize],
    batch: usize,
    seq: usize,
) -> Result<Var> {
    check_tokens(cfg, tokens, batch, seq)?;
    let x = embed(tape, base, "baseline", tokens, batch, seq)?;
    let h = run_stack(tape, base, "baseline.blk", cfg.ctx_layers + cfg.dyn_layers, cfg, x, batch, seq)?;
    head(tape, base, "baseline", h)
}

/// Row-wise log-softmax of a logits tensor, outside any tape.
pub fn log_softmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, z| m.max(z.f64()));
            let lse = row.iter().map(|z| (z.f64() - mx).exp()).sum::<f64>().ln() + mx;
            row.iter().map(|z| z.f64() - lse).collect()
        })
        .collect()
}

/// Forward-only queries on a single sequence.
impl<T: Real> Models<T> {
    /// Hindsight action indices for `tokens`, one fewer than the tokens.
    pub fn infer_actions(&self, tokens: &[usize]) -> Result<Vec<usize>> {
        self.infer_actions_batch(tokens, 1, tokens.len())
    }

    pub fn infer_actions_batch(&self, tokens: &[usize], batch: usize, seq: usize) -> Result<Vec<usize>> {
        if seq < 2 {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let inv = Binder::new(&self.inverse, false);
        let e = inverse_embed(&mut tape, &inv, &self.config, tokens, batch, seq)?;
        Ok(nearest_codes(self.codebook(), tape.value(e)))
    }

    /// Log-probabilities over actions at each position, `[seq][n_codes]`.
    pub fn policy_log_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let pol = Binder::new(&self.policy, false);
        let l = policy_logits(&mut tape, &pol, &self.config, tokens, 1, tokens.len())?;
        Ok(log_softmax_rows(tape.value(l)))
    }

    /// Log-probabilities over tokens at each position given one action per token.
    pub fn world_log_probs(&self, tokens: &[usize], codes: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let w = Binder::new(&self.world, false);
        let inv = Binder::new(&self.inverse, false);
        let l = world_logits(&mut tape, &w, &inv, &self.config, tokens, codes, 1, tokens.len())?;
        Ok(log_softmax_rows(tape.value(l)))
    }

    pub fn baseline_log_probs(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let b = Binder::new(&self.baseline, false);
        let l = baseline_logits(&mut tape, &b, &self.config, tokens, 1, tokens.len())?;
        Ok(log_softmax_rows(tape.value(l)))
    }

    /// Next-token log-probabilities at the last position for every possible
    /// final action, `[n_codes][vocab]`. Earlier positions use `prefix_codes`.
    pub fn world_final_step_all_actions(&self, tokens: &[usize], prefix_codes: &[usize]) -> Result<Vec<Vec<f64>>> {
        let t = tokens.len();
        if prefix_codes.len() + 1 != t {
            return Err(CoreError::contract(format!(
                "{} prefix actions for {t} tokens",
                prefix_codes.len()
            )));
        }
        let n = self.config.n_codes;
        let mut tape = Tape::new();
        let w = Binder::new(&self.world, false);
        let inv = Binder::new(&self.inverse, false);
        let ctx = world_context(&mut tape, &w, &self.config, tokens, 1, t)?;
        let rep: Vec<usize> = (0..n).flat_map(|_| 0..t).collect();
        let ctx = tape.gather_rows(ctx, &rep)?;
        let codes: Vec<usize> = (0..n)
            .flat_map(|a| prefix_codes.iter().copied().chain(std::iter::once(a)))
            .collect();
        let av = code_vectors(&mut tape, &inv, &self.config, &codes)?;
        let l = world_decode(&mut tape, &w, &self.config, ctx, av, n, t)?;
        let lv = tape.value(l);
        let last: Vec<usize> = (0..n).map(|a| a * t + t - 1).collect();
        let rows = log_softmax_rows(lv);
        Ok(last.into_iter().map(|r| rows[r].clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 16,
            n_heads: 2,
            ffn_hidden: 32,
            max_context: 16,
            n_codes: 8,
            d_code: 4,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn default_config_is_valid() {
        ModelConfig::default().validate().unwrap();
        let bad = ModelConfig {
            dyn_layers: 3,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn shapes() {
        let m = Models::<f32>::init(tiny(), 0).unwrap();
        let toks = [257, 104, 105, 33, 258];
        assert_eq!(m.infer_actions(&toks).unwrap().len(), 4);
        assert_eq!(m.infer_actions(&toks[..1]).unwrap().len(), 0);
        let lp = m.policy_log_probs(&toks).unwrap();
        assert_eq!((lp.len(), lp[0].len()), (5, 8));
        let wl = m.world_log_probs(&toks, &[0, 1, 2, 3, 4]).unwrap();
        assert_eq!((wl.len(), wl[0].len()), (5, 259));
        assert!(m.world_log_probs(&toks, &[0, 1]).is_err());
        assert!(matches!(
            m.world_log_probs(&toks, &[0, 1, 2, 3, 9]),
            Err(CoreError::ActionRange { action: 9, .. })
        ));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        let cb = Tensor::new(vec![3, 1], vec![1.0f64, -1.0, 1.0]).unwrap();
        let e = Tensor::new(vec![1, 1], vec![0.0f64]).unwrap();
        assert_eq!(nearest_codes(&cb, &e), vec![0]);
    }

    #[test]
    fn codebook_init_is_bounded() {
        let m = Models::<f64>::init(ModelConfig::default(), 3).unwrap();
        assert!(m.codebook().data().iter().all(|x| x.abs() <= 1.0 / 64.0));
        assert_eq!(m.codebook().shape(), &[64, 16]);
    }
}
