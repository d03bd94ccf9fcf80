//! Inference loop: hindsight actions for the prompt, then policy-chosen
//! actions driving the world model one token at a time.

use std::io::Write;
use std::path::Path;

use bwarea_tensor::Real;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{CoreError, Result};
use crate::model::Models;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Sample,
    Greedy,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RolloutOptions {
    pub mode: Mode,
    pub max_len: usize,
    pub seed: u64,
    pub temperature: f64,
    /// Sample world-model tokens in `Sample` mode instead of taking the argmax.
    pub sample_tokens: bool,
}

impl RolloutOptions {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            mode: Mode::Greedy,
            max_len,
            seed: 0,
            temperature: 1.0,
            sample_tokens: false,
        }
    }

    pub fn sample(max_len: usize, seed: u64) -> Self {
        Self {
            mode: Mode::Sample,
            seed,
            ..Self::greedy(max_len)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    /// Inverse-model actions for prompt positions `0..p-1`.
    pub prefix_actions: Vec<usize>,
    /// Policy actions, one per generated token.
    pub policy_actions: Vec<usize>,
    pub action_log_probs: Vec<f64>,
    pub token_log_probs: Vec<f64>,
}

impl RolloutTrace {
    pub fn actions(&self) -> Vec<usize> {
        let mut a = self.prefix_actions.clone();
        a.extend_from_slice(&self.policy_actions);
        a
    }

    pub fn sequence(&self) -> Vec<usize> {
        let mut s = self.prompt.clone();
        s.extend_from_slice(&self.generated);
        s
    }

    /// Token positions whose action came from the policy.
    pub fn policy_positions(&self) -> std::ops::Range<usize> {
        let p = self.prompt.len();
        p - 1..p - 1 + self.policy_actions.len()
    }
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn draw(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let mx = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    let w: Vec<f64> = row.iter().map(|&z| ((z - mx) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&w).map_err(|e| CoreError::contract(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

fn check_prompt(models: &Models<impl Real>, prompt: &[usize]) -> Result<()> {
    if prompt.is_empty() {
        return Err(CoreError::contract("prompt must hold at least one token"));
    }
    if prompt.len() > models.config.max_context {
        return Err(bwarea_tensor::TensorError::ContextLength {
            len: prompt.len(),
            max: models.config.max_context,
        }
        .into());
    }
    Ok(())
}

/// Generates until `<eos>`, `max_len` new tokens, or the context limit.
pub fn rollout<T: Real>(models: &Models<T>, prompt: &[usize], opts: &RolloutOptions) -> Result<RolloutTrace> {
    check_prompt(models, prompt)?;
    let eos = Vocabulary::byte_level().eos;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trace = RolloutTrace {
        prompt: prompt.to_vec(),
        generated: Vec::new(),
        prefix_actions: models.infer_actions(prompt)?,
        policy_actions: Vec::new(),
        action_log_probs: Vec::new(),
        token_log_probs: Vec::new(),
    };
    let mut seq = prompt.to_vec();
    let mut actions = trace.prefix_actions.clone();
    while trace.generated.len() < opts.max_len && seq.len() <= models.config.max_context {
        let pol = models.policy_log_probs(&seq)?;
        let prow = pol.last().expect("non-empty sequence");
        let a = match opts.mode {
            Mode::Greedy => argmax(prow),
            Mode::Sample => draw(prow, opts.temperature, &mut rng)?,
        };
        actions.push(a);
        let world = models.world_log_probs(&seq, &actions)?;
        let wrow = world.last().expect("non-empty sequence");
        let x = match opts.mode {
            Mode::Sample if opts.sample_tokens => draw(wrow, opts.temperature, &mut rng)?,
            _ => argmax(wrow),
        };
        trace.policy_actions.push(a);
        trace.action_log_probs.push(prow[a]);
        trace.generated.push(x);
        trace.token_log_probs.push(wrow[x]);
        seq.push(x);
        if x == eos {
            break;
        }
    }
    Ok(trace)
}

/// Recomputes the per-step action and token log-probabilities of a trace in
/// one teacher-forced pass.
pub fn score_trace<T: Real>(models: &Models<T>, trace: &RolloutTrace) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = trace.generated.len();
    if n == 0 {
        return Ok((Vec::new(), Vec::new()));
    }
    let seq = trace.sequence();
    let inputs = &seq[..seq.len() - 1];
    let pol = models.policy_log_probs(inputs)?;
    let world = models.world_log_probs(inputs, &trace.actions())?;
    let mut alp = Vec::with_capacity(n);
    let mut tlp = Vec::with_capacity(n);
    for (k, pos) in trace.policy_positions().enumerate() {
        alp.push(pol[pos][trace.policy_actions[k]]);
        tlp.push(world[pos][trace.generated[k]]);
    }
    Ok((alp, tlp))
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ActionOverride {
    Fixed(usize),
    PerStep(Vec<usize>),
}

/// Greedy generation with the policy bypassed: the override drives every
/// generated step. A per-step list bounds the number of steps.
pub fn probe_actions<T: Real>(
    models: &Models<T>,
    prompt: &[usize],
    action: &ActionOverride,
    max_len: usize,
) -> Result<Vec<usize>> {
    check_prompt(models, prompt)?;
    let n = models.config.n_codes;
    let (steps, pick): (usize, Box<dyn Fn(usize) -> usize>) = match action {
        ActionOverride::Fixed(a) => (max_len, Box::new(move |_| *a)),
        ActionOverride::PerStep(list) => {
            let list = list.clone();
            (max_len.min(list.len()), Box::new(move |i| list[i]))
        }
    };
    for i in 0..steps {
        let a = pick(i);
        if a >= n {
            return Err(CoreError::ActionRange { action: a, size: n });
        }
    }
    let eos = Vocabulary::byte_level().eos;
    let mut seq = prompt.to_vec();
    let mut actions = models.infer_actions(prompt)?;
    let mut out = Vec::new();
    for i in 0..steps {
        if seq.len() > models.config.max_context {
            break;
        }
        actions.push(pick(i));
        let world = models.world_log_probs(&seq, &actions)?;
        let x = argmax(world.last().expect("non-empty sequence"));
        out.push(x);
        seq.push(x);
        if x == eos {
            break;
        }
    }
    Ok(out)
}

/// The `k` most probable policy actions after `tokens`, with probabilities.
pub fn top_actions<T: Real>(models: &Models<T>, tokens: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
    let lp = models.policy_log_probs(tokens)?;
    let mut ranked: Vec<(usize, f64)> = lp
        .last()
        .expect("non-empty sequence")
        .iter()
        .enumerate()
        .map(|(i, &l)| (i, l.exp()))
        .collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineTrace {
    pub prompt: Vec<usize>,
    pub generated: Vec<usize>,
    pub token_log_probs: Vec<f64>,
}

/// Plain autoregressive generation with the baseline model.
pub fn baseline_rollout<T: Real>(models: &Models<T>, prompt: &[usize], opts: &RolloutOptions) -> Result<BaselineTrace> {
    check_prompt(models, prompt)?;
    let eos = Vocabulary::byte_level().eos;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut seq = prompt.to_vec();
    let mut trace = BaselineTrace {
        prompt: prompt.to_vec(),
        generated: Vec::new(),
        token_log_probs: Vec::new(),
    };
    while trace.generated.len() < opts.max_len && seq.len() <= models.config.max_context {
        let lp = models.baseline_log_probs(&seq)?;
        let row = lp.last().expect("non-empty sequence");
        let x = match opts.mode {
            Mode::Greedy => argmax(row),
            Mode::Sample => draw(row, opts.temperature, &mut rng)?,
        };
        trace.generated.push(x);
        trace.token_log_probs.push(row[x]);
        seq.push(x);
        if x == eos {
            break;
        }
    }
    Ok(trace)
}

/// Appends traces as newline-delimited JSON records.
pub fn export_traces(path: &Path, traces: &[RolloutTrace]) -> Result<()> {
    let file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| CoreError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for t in traces {
        serde_json::to_writer(&mut w, t)?;
        w.write_all(b"\n").map_err(|e| CoreError::io(path, e))?;
    }
    w.flush().map_err(|e| CoreError::io(path, e))
}
