//! Joint world/inverse pre-training, policy behavior cloning, masked SFT,
//! policy-only ReMax RL, and the matching baseline updates.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use bwarea_tensor::nn::Binder;
use bwarea_tensor::{clip_global_norm, global_norm, kernels, Adam, ParamStore, Real, Tape, Tensor, Var};
use log::{debug, info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{histogram, PretrainBatch, SftBatch, Vocabulary};
use crate::env::RewardFunction;
use crate::error::{CoreError, Result};
use crate::generate::{baseline_rollout, rollout, BaselineTrace, RolloutOptions, RolloutTrace};
use crate::model::{self, ModelConfig, Models};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain1,
    Pretrain2,
    Sft,
    Rl,
    Eval,
    Generate,
    Probe,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain1 => "pretrain1",
            Stage::Pretrain2 => "pretrain2",
            Stage::Sft => "sft",
            Stage::Rl => "rl",
            Stage::Eval => "eval",
            Stage::Generate => "generate",
            Stage::Probe => "probe",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stage {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "pretrain1" => Stage::Pretrain1,
            "pretrain2" => Stage::Pretrain2,
            "sft" => Stage::Sft,
            "rl" => Stage::Rl,
            "eval" => Stage::Eval,
            "generate" => Stage::Generate,
            "probe" => Stage::Probe,
            _ => return Err(CoreError::Config(format!("unknown stage {s:?}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub seq_len: usize,
    pub pretrain_steps: usize,
    pub bc_steps: usize,
    pub sft_epochs: usize,
    pub sft_max_len: usize,
    pub rl_iterations: usize,
    pub lr_pretrain: f64,
    pub lr_sft: f64,
    pub lr_rl: f64,
    pub beta: f64,
    pub lambda_c: f64,
    pub clip_norm: f64,
    pub kl_coef: f64,
    pub gen_max_len: usize,
    pub temperature: f64,
    /// Re-seed codes unused for this many steps; 0 disables.
    pub dead_code_steps: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            batch_size: 16,
            seq_len: 128,
            pretrain_steps: 2000,
            bc_steps: 1000,
            sft_epochs: 2,
            sft_max_len: 64,
            rl_iterations: 20_000,
            lr_pretrain: 4e-4,
            lr_sft: 4e-4,
            lr_rl: 1e-3,
            beta: 0.25,
            lambda_c: 25.0,
            clip_norm: 1.0,
            kl_coef: 0.0,
            gen_max_len: 64,
            temperature: 1.0,
            dead_code_steps: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CoreError::Config(m));
        if self.beta <= 0.0 || self.lambda_c <= 0.0 {
            return bad(format!("beta ({}) and lambda_c ({}) must be positive", self.beta, self.lambda_c));
        }
        for (name, lr) in [("lr_pretrain", self.lr_pretrain), ("lr_sft", self.lr_sft), ("lr_rl", self.lr_rl)] {
            if lr <= 0.0 || !lr.is_finite() {
                return bad(format!("{name} must be positive, got {lr}"));
            }
        }
        if self.seq_len < 2 || self.batch_size == 0 {
            return bad("seq_len must be at least 2 and batch_size positive".into());
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive".into());
        }
        Ok(())
    }
}

/// Per-step scalars written to the run log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossReport {
    pub stage: String,
    pub step: u64,
    pub total: f64,
    pub predict: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub policy_bc: f64,
    pub lm: f64,
    pub rl_objective: f64,
    pub mean_reward: f64,
    pub mean_advantage: f64,
    pub grad_norm: f64,
    pub episodes: usize,
    pub dropped_episodes: usize,
    pub skipped: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub code_histogram: Vec<u32>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub reseeded_codes: Vec<usize>,
}

impl LossReport {
    fn new(stage: &str, step: u64) -> Self {
        Self {
            stage: stage.to_string(),
            step,
            ..Self::default()
        }
    }

    pub fn all_finite(&self) -> bool {
        [
            self.total,
            self.predict,
            self.commitment,
            self.codebook,
            self.policy_bc,
            self.lm,
            self.rl_objective,
            self.mean_reward,
            self.mean_advantage,
            self.grad_norm,
        ]
        .iter()
        .all(|x| x.is_finite())
    }
}

/// Append-only newline-delimited JSON log.
pub struct RunLog {
    out: Option<std::io::BufWriter<std::fs::File>>,
    path: String,
}

impl RunLog {
    pub fn disabled() -> Self {
        Self {
            out: None,
            path: String::new(),
        }
    }

    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| CoreError::io(path, e))?;
        Ok(Self {
            out: Some(std::io::BufWriter::new(f)),
            path: path.display().to_string(),
        })
    }

    pub fn record<S: Serialize>(&mut self, rec: &S) -> Result<()> {
        if let Some(w) = &mut self.out {
            serde_json::to_writer(&mut *w, rec)?;
            w.write_all(b"\n").map_err(|e| CoreError::io(&self.path, e))?;
            w.flush().map_err(|e| CoreError::io(&self.path, e))?;
        }
        Ok(())
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LossReport>> {
    let f = std::fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CoreError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CoreError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Token rows plus a weight per next-token target (`batch*(seq-1)` entries).
#[derive(Clone, Debug, PartialEq)]
pub struct WeightedBatch {
    pub tokens: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    pub weights: Vec<f64>,
}

impl WeightedBatch {
    pub fn inputs(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| self.tokens[b * self.seq..(b + 1) * self.seq - 1].iter().copied())
            .collect()
    }

    pub fn targets(&self) -> Vec<usize> {
        (0..self.batch)
            .flat_map(|b| self.tokens[b * self.seq + 1..(b + 1) * self.seq].iter().copied())
            .collect()
    }

    fn check(&self) -> Result<()> {
        if self.seq < 2 {
            return Err(CoreError::contract("training rows need at least two tokens"));
        }
        if self.tokens.len() != self.batch * self.seq || self.weights.len() != self.batch * (self.seq - 1) {
            return Err(CoreError::contract("batch tokens or weights have the wrong length"));
        }
        Ok(())
    }

    fn total_weight(&self) -> f64 {
        self.weights.iter().sum()
    }
}

impl From<&PretrainBatch> for WeightedBatch {
    fn from(b: &PretrainBatch) -> Self {
        Self {
            tokens: b.tokens.clone(),
            batch: b.batch,
            seq: b.seq,
            weights: vec![1.0; b.batch * (b.seq.max(1) - 1)],
        }
    }
}

impl From<&SftBatch> for WeightedBatch {
    fn from(b: &SftBatch) -> Self {
        Self {
            tokens: b.tokens.clone(),
            batch: b.batch,
            seq: b.seq,
            weights: b.target_weights().into_iter().map(f64::from).collect(),
        }
    }
}

fn cast_weights<T: Real>(w: &[f64]) -> Vec<T> {
    w.iter().map(|&x| T::of(x)).collect()
}

fn normalized<T: Real>(w: &[f64]) -> Vec<T> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|&x| T::of(x / s)).collect()
    } else {
        vec![T::zero(); w.len()]
    }
}

pub struct Stage1Terms {
    pub total: Var,
    pub predict: Var,
    pub commitment: Var,
    pub codebook: Var,
    pub encodings: Var,
    pub indices: Vec<usize>,
}

/// `L_predict + β·(commitment + codebook)` with every term weighted per target.
#[allow(clippy::too_many_arguments)]
pub fn stage1_loss<T: Real>(
    tape: &mut Tape<T>,
    world: &Binder<'_, T>,
    inverse: &Binder<'_, T>,
    cfg: &ModelConfig,
    batch: &WeightedBatch,
    beta: f64,
    lambda_c: f64,
) -> Result<Stage1Terms> {
    batch.check()?;
    let (b, t) = (batch.batch, batch.seq);
    let ctx = model::world_context(tape, world, cfg, &batch.inputs(), b, t - 1)?;
    let e = model::inverse_embed(tape, inverse, cfg, &batch.tokens, b, t)?;
    let q = model::quantize(tape, inverse, e, lambda_c)?;
    let logits = model::world_decode(tape, world, cfg, ctx, q.straight_through, b, t - 1)?;
    let predict = tape.softmax_cross_entropy(logits, &batch.targets(), &cast_weights(&batch.weights))?;
    let norm = normalized::<T>(&batch.weights);
    let commitment = tape.dot_const(q.commitment, &norm)?;
    let codebook = tape.dot_const(q.codebook, &norm)?;
    let vq = tape.add(commitment, codebook)?;
    let vq = tape.scale(vq, T::of(beta));
    let total = tape.add(predict, vq)?;
    Ok(Stage1Terms {
        total,
        predict,
        commitment,
        codebook,
        encodings: e,
        indices: q.indices,
    })
}

/// Mean negative log-likelihood of the inverse model's actions under the policy.
pub fn bc_loss<T: Real>(
    tape: &mut Tape<T>,
    policy: &Binder<'_, T>,
    cfg: &ModelConfig,
    batch: &WeightedBatch,
    targets: &[usize],
) -> Result<Var> {
    batch.check()?;
    let logits = model::policy_logits(tape, policy, cfg, &batch.inputs(), batch.batch, batch.seq - 1)?;
    Ok(tape.softmax_cross_entropy(logits, targets, &cast_weights(&batch.weights))?)
}

pub fn baseline_loss<T: Real>(
    tape: &mut Tape<T>,
    baseline: &Binder<'_, T>,
    cfg: &ModelConfig,
    batch: &WeightedBatch,
) -> Result<Var> {
    batch.check()?;
    let logits = model::baseline_logits(tape, baseline, cfg, &batch.inputs(), batch.batch, batch.seq - 1)?;
    Ok(tape.softmax_cross_entropy(logits, &batch.targets(), &cast_weights(&batch.weights))?)
}

fn ensure_finite(step: u64, value: f64, dump: impl FnOnce() -> String) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(CoreError::NonFiniteLoss { step, dump: dump() })
    }
}

fn frozen_guard<T: Real>(stage: &str, before: &[(&str, u64)], after: &[(&str, &ParamStore<T>)]) -> Result<()> {
    for ((name, sum), (_, store)) in before.iter().zip(after) {
        if store.checksum() != *sum {
            return Err(CoreError::contract(format!("{stage} modified frozen {name} parameters")));
        }
    }
    Ok(())
}

/// Tracks when each code was last selected and re-seeds stale ones.
#[derive(Clone, Debug)]
pub struct DeadCodeMonitor {
    after: u64,
    last_used: Vec<u64>,
    rng: ChaCha8Rng,
}

impl DeadCodeMonitor {
    pub fn new(n_codes: usize, after: u64, seed: u64) -> Self {
        Self {
            after,
            last_used: vec![0; n_codes],
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Replaces codes unused for `after` steps with random rows of `encodings`.
    pub fn observe<T: Real>(
        &mut self,
        step: u64,
        indices: &[usize],
        encodings: &Tensor<T>,
        codebook: &mut Tensor<T>,
    ) -> Vec<usize> {
        for &i in indices {
            self.last_used[i] = step;
        }
        if self.after == 0 || encodings.rows() == 0 {
            return Vec::new();
        }
        let d = codebook.cols();
        let mut reseeded = Vec::new();
        for code in 0..self.last_used.len() {
            if step.saturating_sub(self.last_used[code]) >= self.after {
                let r = self.rng.gen_range(0..encodings.rows());
                codebook.data_mut()[code * d..(code + 1) * d].copy_from_slice(encodings.row(r));
                self.last_used[code] = step;
                reseeded.push(code);
            }
        }
        if !reseeded.is_empty() {
            info!("step {step}: re-seeded {} dead codes {:?}", reseeded.len(), reseeded);
        }
        reseeded
    }
}

/// One joint update of the world and inverse models.
pub fn pretrain_step1<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    batch: &WeightedBatch,
    tc: &TrainConfig,
    step: u64,
    monitor: Option<&mut DeadCodeMonitor>,
) -> Result<LossReport> {
    let mut report = LossReport::new("pretrain1", step);
    if batch.total_weight() <= 0.0 {
        warn!("step {step}: every target is masked; skipping");
        report.skipped = true;
        return Ok(report);
    }
    let cfg = models.config;
    let policy_sum = models.policy.checksum();
    let baseline_sum = models.baseline.checksum();
    let mut tape = Tape::new();
    let (terms, enc) = {
        let w = Binder::new(&models.world, true);
        let inv = Binder::new(&models.inverse, true);
        let terms = stage1_loss(&mut tape, &w, &inv, &cfg, batch, tc.beta, tc.lambda_c)?;
        let enc = tape.value(terms.encodings).clone();
        (terms, enc)
    };
    report.predict = tape.value(terms.predict).item().f64();
    report.commitment = tape.value(terms.commitment).item().f64();
    report.codebook = tape.value(terms.codebook).item().f64();
    report.total = tape.value(terms.total).item().f64();
    ensure_finite(step, report.total, || {
        format!(
            "predict={} commitment={} codebook={}",
            report.predict, report.commitment, report.codebook
        )
    })?;
    tape.backward(terms.total)?;
    let grads = tape.named_grads();
    report.grad_norm = global_norm(&grads);
    opt.step(&mut [&mut models.world, &mut models.inverse], grads)?;
    report.code_histogram = histogram(&terms.indices, cfg.n_codes);
    if let Some(m) = monitor {
        let cb = models.inverse.get_mut("inverse.codebook").expect("codebook present");
        report.reseeded_codes = m.observe(step, &terms.indices, &enc, cb);
    }
    frozen_guard(
        "pretrain1",
        &[("policy", policy_sum), ("baseline", baseline_sum)],
        &[("policy", &models.policy), ("baseline", &models.baseline)],
    )?;
    Ok(report)
}

/// One behavior-cloning update of the policy against frozen inverse actions.
pub fn pretrain_step2<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    batch: &WeightedBatch,
    step: u64,
) -> Result<LossReport> {
    let mut report = LossReport::new("pretrain2", step);
    if batch.total_weight() <= 0.0 {
        warn!("step {step}: every target is masked; skipping");
        report.skipped = true;
        return Ok(report);
    }
    let world_sum = models.world.checksum();
    let inverse_sum = models.inverse.checksum();
    let targets = models.infer_actions_batch(&batch.tokens, batch.batch, batch.seq)?;
    let cfg = models.config;
    let mut tape = Tape::new();
    let loss = {
        let p = Binder::new(&models.policy, true);
        bc_loss(&mut tape, &p, &cfg, batch, &targets)?
    };
    report.policy_bc = tape.value(loss).item().f64();
    report.total = report.policy_bc;
    ensure_finite(step, report.total, || format!("policy_bc={}", report.policy_bc))?;
    tape.backward(loss)?;
    let grads = tape.named_grads();
    report.grad_norm = global_norm(&grads);
    opt.step(&mut [&mut models.policy], grads)?;
    report.code_histogram = histogram(&targets, cfg.n_codes);
    frozen_guard(
        "pretrain2",
        &[("world", world_sum), ("inverse", inverse_sum)],
        &[("world", &models.world), ("inverse", &models.inverse)],
    )?;
    Ok(report)
}

/// Which half of the two-step procedure an SFT update runs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SftPart {
    WorldInverse,
    Policy,
}

/// Masked fine-tuning: the pre-training update restricted to answer targets.
pub fn sft_step<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    batch: &SftBatch,
    tc: &TrainConfig,
    part: SftPart,
    step: u64,
) -> Result<LossReport> {
    let wb = WeightedBatch::from(batch);
    let mut r = match part {
        SftPart::WorldInverse => pretrain_step1(models, opt, &wb, tc, step, None)?,
        SftPart::Policy => pretrain_step2(models, opt, &wb, step)?,
    };
    r.stage = "sft".into();
    Ok(r)
}

/// Teacher-forced update of the baseline model alone.
pub fn baseline_step<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    batch: &WeightedBatch,
    step: u64,
) -> Result<LossReport> {
    let mut report = LossReport::new("baseline", step);
    if batch.total_weight() <= 0.0 {
        report.skipped = true;
        return Ok(report);
    }
    let cfg = models.config;
    let mut tape = Tape::new();
    let loss = {
        let b = Binder::new(&models.baseline, true);
        baseline_loss(&mut tape, &b, &cfg, batch)?
    };
    report.lm = tape.value(loss).item().f64();
    report.total = report.lm;
    ensure_finite(step, report.total, || format!("lm={}", report.lm))?;
    tape.backward(loss)?;
    let grads = tape.named_grads();
    report.grad_norm = global_norm(&grads);
    opt.step(&mut [&mut models.baseline], grads)?;
    Ok(report)
}

/// Fine-tunes the world model alone, with actions from the frozen inverse model.
pub fn world_finetune_step<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    batch: &WeightedBatch,
    step: u64,
) -> Result<LossReport> {
    let mut report = LossReport::new("world_finetune", step);
    let inverse_sum = models.inverse.checksum();
    let cfg = models.config;
    let mut tape = Tape::new();
    let terms = {
        let w = Binder::new(&models.world, true);
        let inv = Binder::new(&models.inverse, false);
        stage1_loss(&mut tape, &w, &inv, &cfg, batch, 0.0, 0.0)?
    };
    report.predict = tape.value(terms.predict).item().f64();
    report.total = report.predict;
    ensure_finite(step, report.total, || format!("predict={}", report.predict))?;
    tape.backward(terms.total)?;
    let grads = tape.named_grads();
    report.grad_norm = global_norm(&grads);
    opt.step(&mut [&mut models.world], grads)?;
    frozen_guard("world fine-tuning", &[("inverse", inverse_sum)], &[("inverse", &models.inverse)])?;
    Ok(report)
}

/// Deterministic per-episode seed.
pub fn episode_seed(base: u64, step: u64, episode: usize) -> u64 {
    let mut z = base
        .wrapping_add(step.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((episode as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One scored sampled/greedy roll-out pair.
#[derive(Clone, Debug)]
pub struct Episode {
    pub sampled: RolloutTrace,
    pub greedy: RolloutTrace,
    pub reward: f64,
    pub greedy_reward: f64,
}

impl Episode {
    pub fn advantage(&self) -> f64 {
        self.reward - self.greedy_reward
    }
}

fn pad_rows(rows: &[Vec<usize>], pad: usize) -> (Vec<usize>, usize) {
    let seq = rows.iter().map(Vec::len).max().unwrap_or(0);
    let mut flat = Vec::with_capacity(rows.len() * seq);
    for r in rows {
        flat.extend_from_slice(r);
        flat.extend(std::iter::repeat_n(pad, seq - r.len()));
    }
    (flat, seq)
}

/// ReMax surrogate over policy positions: `Σ (A_e / E)·(−log π(a_t | x_{≤t}))`,
/// plus an optional KL penalty to a reference policy on the same positions.
pub fn policy_gradient_loss<T: Real>(
    tape: &mut Tape<T>,
    policy: &Binder<'_, T>,
    reference: Option<&ParamStore<T>>,
    kl_coef: f64,
    cfg: &ModelConfig,
    episodes: &[(RolloutTrace, f64)],
) -> Result<Var> {
    let pad = Vocabulary::byte_level().pad;
    let rows: Vec<Vec<usize>> = episodes
        .iter()
        .map(|(t, _)| {
            let s = t.sequence();
            s[..s.len() - 1].to_vec()
        })
        .collect();
    let (flat, seq) = pad_rows(&rows, pad);
    let logits = model::policy_logits(tape, policy, cfg, &flat, episodes.len(), seq)?;
    let n = episodes.len() as f64;
    let mut targets = vec![0usize; flat.len()];
    let mut weights = vec![T::zero(); flat.len()];
    let mut mask = vec![0.0f64; flat.len()];
    for (e, (trace, adv)) in episodes.iter().enumerate() {
        for (k, pos) in trace.policy_positions().enumerate() {
            targets[e * seq + pos] = trace.policy_actions[k];
            weights[e * seq + pos] = T::of(adv / n);
            mask[e * seq + pos] = 1.0 / n;
        }
    }
    let pg = tape.weighted_nll(logits, &targets, &weights)?;
    if kl_coef == 0.0 {
        return Ok(pg);
    }
    let reference = reference.ok_or_else(|| CoreError::Config("kl_coef > 0 requires a reference policy".into()))?;
    let ref_lp = {
        let mut rt = Tape::new();
        let rb = Binder::new(reference, false);
        let l = model::policy_logits(&mut rt, &rb, cfg, &flat, episodes.len(), seq)?;
        let lp = rt.log_softmax(l);
        rt.value(lp).clone()
    };
    let lp = tape.log_softmax(logits);
    let p = tape.exp(lp);
    let r = tape.constant(ref_lp);
    let diff = tape.sub(lp, r)?;
    let terms = tape.mul(p, diff)?;
    let k = cfg.n_codes;
    let wk: Vec<T> = mask.iter().flat_map(|&m| std::iter::repeat_n(T::of(m * kl_coef), k)).collect();
    let kl = tape.dot_const(terms, &wk)?;
    Ok(tape.add(pg, kl)?)
}

/// Parallel sampled and greedy roll-outs for every prompt, scored by `reward`.
/// Episodes whose reward function fails are dropped and counted.
pub fn collect_episodes<T: Real>(
    models: &Models<T>,
    prompts: &[Vec<usize>],
    reward: &dyn RewardFunction,
    tc: &TrainConfig,
    step: u64,
) -> Result<(Vec<Episode>, usize)> {
    let results = kernels::par_map(prompts.len(), |i| -> Result<Option<Episode>> {
        let mut sopts = RolloutOptions::sample(tc.gen_max_len, episode_seed(tc.seed, step, i));
        sopts.temperature = tc.temperature;
        let sampled = rollout(models, &prompts[i], &sopts)?;
        let greedy = rollout(models, &prompts[i], &RolloutOptions::greedy(tc.gen_max_len))?;
        let scored = reward
            .score(&sampled.prompt, &sampled.generated)
            .and_then(|r| Ok((r, reward.score(&greedy.prompt, &greedy.generated)?)));
        match scored {
            Ok((r, g)) => Ok(Some(Episode {
                sampled,
                greedy,
                reward: r,
                greedy_reward: g,
            })),
            Err(e) => {
                warn!("step {step}: dropping episode {i}: {e}");
                Ok(None)
            }
        }
    });
    let mut episodes = Vec::new();
    let mut dropped = 0;
    for r in results {
        match r? {
            Some(e) => episodes.push(e),
            None => dropped += 1,
        }
    }
    Ok((episodes, dropped))
}

/// One ReMax update of the policy; world and inverse stay frozen.
pub fn rl_update<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    prompts: &[Vec<usize>],
    reward: &dyn RewardFunction,
    reference: Option<&ParamStore<T>>,
    tc: &TrainConfig,
    step: u64,
) -> Result<LossReport> {
    let mut report = LossReport::new("rl", step);
    let world_sum = models.world.checksum();
    let inverse_sum = models.inverse.checksum();
    let (episodes, dropped) = collect_episodes(models, prompts, reward, tc, step)?;
    report.dropped_episodes = dropped;
    report.episodes = episodes.len();
    if episodes.is_empty() {
        report.skipped = true;
        return Ok(report);
    }
    let n = episodes.len() as f64;
    report.mean_reward = episodes.iter().map(|e| e.reward).sum::<f64>() / n;
    report.rl_objective = report.mean_reward;
    report.mean_advantage = episodes.iter().map(Episode::advantage).sum::<f64>() / n;
    let batch: Vec<(RolloutTrace, f64)> = episodes
        .iter()
        .filter(|e| !e.sampled.generated.is_empty())
        .map(|e| (e.sampled.clone(), e.advantage()))
        .collect();
    if batch.iter().all(|(_, a)| *a == 0.0) && tc.kl_coef == 0.0 {
        debug!("step {step}: zero advantage everywhere; no update");
        report.skipped = true;
        return Ok(report);
    }
    let cfg = models.config;
    let mut tape = Tape::new();
    let loss = {
        let p = Binder::new(&models.policy, true);
        policy_gradient_loss(&mut tape, &p, reference, tc.kl_coef, &cfg, &batch)?
    };
    report.total = tape.value(loss).item().f64();
    ensure_finite(step, report.total, || format!("surrogate={}", report.total))?;
    tape.backward(loss)?;
    let mut grads = tape.named_grads();
    report.grad_norm = clip_global_norm(&mut grads, tc.clip_norm);
    opt.step(&mut [&mut models.policy], grads)?;
    frozen_guard(
        "rl",
        &[("world", world_sum), ("inverse", inverse_sum)],
        &[("world", &models.world), ("inverse", &models.inverse)],
    )?;
    Ok(report)
}

/// Token-level ReMax on the baseline model, the comparison arm for RL.
pub fn baseline_rl_update<T: Real>(
    models: &mut Models<T>,
    opt: &mut Adam<T>,
    prompts: &[Vec<usize>],
    reward: &dyn RewardFunction,
    tc: &TrainConfig,
    step: u64,
) -> Result<LossReport> {
    let mut report = LossReport::new("baseline_rl", step);
    let results = kernels::par_map(prompts.len(), |i| -> Result<Option<(BaselineTrace, f64)>> {
        let mut sopts = RolloutOptions::sample(tc.gen_max_len, episode_seed(tc.seed, step, i));
        sopts.temperature = tc.temperature;
        let s = baseline_rollout(models, &prompts[i], &sopts)?;
        let g = baseline_rollout(models, &prompts[i], &RolloutOptions::greedy(tc.gen_max_len))?;
        match (reward.score(&s.prompt, &s.generated), reward.score(&g.prompt, &g.generated)) {
            (Ok(r), Ok(b)) => Ok(Some((s, r - b))),
            (Err(e), _) | (_, Err(e)) => {
                warn!("step {step}: dropping baseline episode {i}: {e}");
                Ok(None)
            }
        }
    });
    let mut batch = Vec::new();
    let mut rewards = 0.0;
    for r in results {
        match r? {
            Some((t, a)) => {
                rewards += reward.score(&t.prompt, &t.generated).unwrap_or(0.0);
                batch.push((t, a));
            }
            None => report.dropped_episodes += 1,
        }
    }
    report.episodes = batch.len();
    if batch.is_empty() {
        report.skipped = true;
        return Ok(report);
    }
    let n = batch.len() as f64;
    report.mean_reward = rewards / n;
    report.mean_advantage = batch.iter().map(|(_, a)| a).sum::<f64>() / n;
    batch.retain(|(t, _)| !t.generated.is_empty());
    if batch.iter().all(|(_, a)| *a == 0.0) {
        report.skipped = true;
        return Ok(report);
    }
    let pad = Vocabulary::byte_level().pad;
    let rows: Vec<Vec<usize>> = batch
        .iter()
        .map(|(t, _)| {
            let mut s = t.prompt.clone();
            s.extend_from_slice(&t.generated);
            s.pop();
            s
        })
        .collect();
    let (flat, seq) = pad_rows(&rows, pad);
    let mut targets = vec![0usize; flat.len()];
    let mut weights = vec![T::zero(); flat.len()];
    for (e, (t, adv)) in batch.iter().enumerate() {
        let p = t.prompt.len();
        for (k, &x) in t.generated.iter().enumerate() {
            targets[e * seq + p - 1 + k] = x;
            weights[e * seq + p - 1 + k] = T::of(adv / n);
        }
    }
    let cfg = models.config;
    let mut tape = Tape::new();
    let loss = {
        let b = Binder::new(&models.baseline, true);
        let logits = model::baseline_logits(&mut tape, &b, &cfg, &flat, batch.len(), seq)?;
        tape.weighted_nll(logits, &targets, &weights)?
    };
    report.total = tape.value(loss).item().f64();
    ensure_finite(step, report.total, || format!("surrogate={}", report.total))?;
    tape.backward(loss)?;
    let mut grads = tape.named_grads();
    report.grad_norm = clip_global_norm(&mut grads, tc.clip_norm);
    opt.step(&mut [&mut models.baseline], grads)?;
    Ok(report)
}
