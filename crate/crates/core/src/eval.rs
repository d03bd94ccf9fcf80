//! Held-out metrics: teacher-forced cross-entropy and accuracy, conditional
//! entropy, the marginal-versus-expected action comparison, and the
//! dirty-token fine-tuning experiment.

use std::fmt::Write as _;

use bwarea_tensor::nn::Binder;
use bwarea_tensor::{kernels, Adam, AdamConfig, Real, Tape};
use serde::{Deserialize, Serialize};

use crate::data::{corrupt_corpus, histogram, window_starts, Corpus, SegmentSampler, Vocabulary};
use crate::env::{play_episode, DecisionGame};
use crate::error::{CoreError, Result};
use crate::generate::{argmax, baseline_rollout, rollout, RolloutOptions};
use crate::model::{self, log_softmax_rows, Models};
use crate::train::{baseline_step, world_finetune_step, WeightedBatch};

const SHARD: usize = 8;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LmScores {
    pub cross_entropy: f64,
    pub perplexity: f64,
    pub accuracy: f64,
    pub mean_entropy: f64,
    pub tokens: usize,
}

#[derive(Clone, Copy, Default)]
struct Sums {
    nll: f64,
    correct: f64,
    entropy: f64,
    count: usize,
}

impl Sums {
    fn add_row(&mut self, lp: &[f64], target: usize) {
        self.nll -= lp[target];
        let best = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        if best == target {
            self.correct += 1.0;
        }
        self.entropy -= lp.iter().map(|&l| if l > f64::NEG_INFINITY { l.exp() * l } else { 0.0 }).sum::<f64>();
        self.count += 1;
    }

    fn merge(self, o: Sums) -> Sums {
        Sums {
            nll: self.nll + o.nll,
            correct: self.correct + o.correct,
            entropy: self.entropy + o.entropy,
            count: self.count + o.count,
        }
    }

    fn scores(self) -> LmScores {
        let n = self.count.max(1) as f64;
        let ce = self.nll / n;
        LmScores {
            cross_entropy: ce,
            perplexity: ce.exp(),
            accuracy: self.correct / n,
            mean_entropy: self.entropy / n,
            tokens: self.count,
        }
    }
}

/// Non-overlapping `seq`-token windows covering the held-out stream.
pub fn heldout_windows(corpus: &Corpus, seq: usize) -> Result<Vec<Vec<usize>>> {
    let w: Vec<Vec<usize>> = window_starts(corpus.len(), seq)
        .into_iter()
        .map(|s| corpus.tokens[s..s + seq].to_vec())
        .collect();
    if w.is_empty() || seq < 2 {
        return Err(CoreError::contract(format!(
            "held-out set of {} tokens yields no windows of {seq}",
            corpus.len()
        )));
    }
    Ok(w)
}

fn check_windows(windows: &[Vec<usize>]) -> Result<usize> {
    let seq = windows.first().map(Vec::len).unwrap_or(0);
    if windows.is_empty() || seq < 2 || windows.iter().any(|w| w.len() != seq) {
        return Err(CoreError::contract("evaluation needs equal-length windows of at least two tokens"));
    }
    Ok(seq)
}

/// Runs `score` over shards of windows in parallel and folds the sums.
fn sharded<F>(windows: &[Vec<usize>], score: F) -> Result<LmScores>
where
    F: Fn(&[Vec<usize>], usize) -> Result<Sums> + Sync,
{
    let seq = check_windows(windows)?;
    let shards: Vec<&[Vec<usize>]> = windows.chunks(SHARD).collect();
    let parts = kernels::par_map(shards.len(), |i| score(shards[i], seq));
    let mut total = Sums::default();
    for p in parts {
        total = total.merge(p?);
    }
    Ok(total.scores())
}

fn split(rows: &[Vec<usize>], seq: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    let flat: Vec<usize> = rows.iter().flatten().copied().collect();
    let inputs = rows.iter().flat_map(|r| r[..seq - 1].iter().copied()).collect();
    let targets = rows.iter().flat_map(|r| r[1..].iter().copied()).collect();
    (flat, inputs, targets)
}

/// World model, teacher-forced with hindsight actions from the inverse model.
pub fn score_world<T: Real>(models: &Models<T>, windows: &[Vec<usize>]) -> Result<LmScores> {
    sharded(windows, |rows, seq| {
        let (flat, inputs, targets) = split(rows, seq);
        let codes = models.infer_actions_batch(&flat, rows.len(), seq)?;
        let mut tape = Tape::new();
        let w = Binder::new(&models.world, false);
        let inv = Binder::new(&models.inverse, false);
        let l = model::world_logits(&mut tape, &w, &inv, &models.config, &inputs, &codes, rows.len(), seq - 1)?;
        let mut s = Sums::default();
        for (lp, &t) in log_softmax_rows(tape.value(l)).iter().zip(&targets) {
            s.add_row(lp, t);
        }
        Ok(s)
    })
}

pub fn score_baseline<T: Real>(models: &Models<T>, windows: &[Vec<usize>]) -> Result<LmScores> {
    sharded(windows, |rows, seq| {
        let (_, inputs, targets) = split(rows, seq);
        let mut tape = Tape::new();
        let b = Binder::new(&models.baseline, false);
        let l = model::baseline_logits(&mut tape, &b, &models.config, &inputs, rows.len(), seq - 1)?;
        let mut s = Sums::default();
        for (lp, &t) in log_softmax_rows(tape.value(l)).iter().zip(&targets) {
            s.add_row(lp, t);
        }
        Ok(s)
    })
}

/// Mean per-position entropy of the world model given hindsight actions and
/// of the baseline, in nats.
pub fn entropy_comparison<T: Real>(models: &Models<T>, windows: &[Vec<usize>]) -> Result<(f64, f64)> {
    Ok((
        score_world(models, windows)?.mean_entropy,
        score_baseline(models, windows)?.mean_entropy,
    ))
}

/// Shannon entropy of a distribution given as log-probabilities.
pub fn entropy_of(log_probs: &[f64]) -> f64 {
    -log_probs
        .iter()
        .map(|&l| if l > f64::NEG_INFINITY { l.exp() * l } else { 0.0 })
        .sum::<f64>()
}

/// Distributions at the final position of a window: the policy over actions
/// and the world model's probability of the true last token under each action.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureTerms {
    pub policy: Vec<f64>,
    pub token_given_action: Vec<f64>,
}

impl MixtureTerms {
    pub fn marginal_ce(&self) -> f64 {
        let best = (0..self.policy.len()).fold(0, |b, i| if self.policy[i] > self.policy[b] { i } else { b });
        -self.token_given_action[best].ln()
    }

    pub fn expected_ce(&self) -> f64 {
        -self
            .policy
            .iter()
            .zip(&self.token_given_action)
            .map(|(p, q)| p * q)
            .sum::<f64>()
            .ln()
    }
}

pub fn mixture_terms<T: Real>(models: &Models<T>, window: &[usize]) -> Result<MixtureTerms> {
    let t = window.len();
    if t < 2 {
        return Err(CoreError::contract("mixture needs a context and a target"));
    }
    let ctx = &window[..t - 1];
    let target = window[t - 1];
    let prefix = models.infer_actions(ctx)?;
    let per_action = models.world_final_step_all_actions(ctx, &prefix)?;
    let policy = models
        .policy_log_probs(ctx)?
        .last()
        .expect("non-empty context")
        .iter()
        .map(|l| l.exp())
        .collect();
    Ok(MixtureTerms {
        policy,
        token_given_action: per_action.iter().map(|row| row[target].exp()).collect(),
    })
}

/// Mean over windows of the final-token cross-entropy under the policy's
/// argmax action and under the exact mixture over all actions.
pub fn marginal_vs_expected_ce<T: Real>(models: &Models<T>, windows: &[Vec<usize>]) -> Result<(f64, f64)> {
    check_windows(windows)?;
    let parts = kernels::par_map(windows.len(), |i| mixture_terms(models, &windows[i]));
    let (mut m, mut e) = (0.0, 0.0);
    for p in parts {
        let p = p?;
        m += p.marginal_ce();
        e += p.expected_ce();
    }
    let n = windows.len() as f64;
    Ok((m / n, e / n))
}

/// Histogram of hindsight codes over the windows and its entropy in nats.
pub fn codebook_usage<T: Real>(models: &Models<T>, windows: &[Vec<usize>]) -> Result<(Vec<u32>, f64)> {
    let seq = check_windows(windows)?;
    let parts = kernels::par_map(windows.len().div_ceil(SHARD), |i| {
        let rows = &windows[i * SHARD..((i + 1) * SHARD).min(windows.len())];
        let flat: Vec<usize> = rows.iter().flatten().copied().collect();
        models.infer_actions_batch(&flat, rows.len(), seq)
    });
    let mut codes = Vec::new();
    for p in parts {
        codes.extend(p?);
    }
    let hist = histogram(&codes, models.config.n_codes);
    let total: u32 = hist.iter().sum();
    let h = hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total as f64;
            -p * p.ln()
        })
        .sum();
    Ok((hist, h))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub world: LmScores,
    pub baseline: LmScores,
    pub marginal_ce: f64,
    pub expected_ce: f64,
    pub codebook_usage_entropy: f64,
    pub codes_used: usize,
    pub windows: usize,
}

impl EvalReport {
    pub fn all_finite(&self) -> bool {
        [
            self.world.cross_entropy,
            self.world.perplexity,
            self.world.mean_entropy,
            self.baseline.cross_entropy,
            self.baseline.perplexity,
            self.baseline.mean_entropy,
            self.marginal_ce,
            self.expected_ce,
            self.codebook_usage_entropy,
        ]
        .iter()
        .all(|x| x.is_finite())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<26}{:>12}{:>12}", "metric", "bwarea", "baseline");
        let rows = [
            ("cross-entropy (nats)", self.world.cross_entropy, self.baseline.cross_entropy),
            ("perplexity", self.world.perplexity, self.baseline.perplexity),
            ("next-token accuracy", self.world.accuracy, self.baseline.accuracy),
            ("mean entropy (nats)", self.world.mean_entropy, self.baseline.mean_entropy),
        ];
        for (name, a, b) in rows {
            let _ = writeln!(s, "{name:<26}{a:>12.4}{b:>12.4}");
        }
        let _ = writeln!(s, "{:<26}{:>12.4}", "marginal CE (argmax a)", self.marginal_ce);
        let _ = writeln!(s, "{:<26}{:>12.4}", "expected CE (mixture)", self.expected_ce);
        let _ = writeln!(s, "{:<26}{:>12.4}", "code usage entropy", self.codebook_usage_entropy);
        let _ = writeln!(s, "{:<26}{:>12}", "codes used", self.codes_used);
        s
    }
}

/// Full held-out evaluation; the mixture terms use at most `mixture_windows`.
pub fn eval_lm<T: Real>(models: &Models<T>, windows: &[Vec<usize>], mixture_windows: usize) -> Result<EvalReport> {
    check_windows(windows)?;
    let world = score_world(models, windows)?;
    let baseline = score_baseline(models, windows)?;
    let k = mixture_windows.clamp(1, windows.len());
    let (marginal_ce, expected_ce) = marginal_vs_expected_ce(models, &windows[..k])?;
    let (hist, h) = codebook_usage(models, windows)?;
    Ok(EvalReport {
        world,
        baseline,
        marginal_ce,
        expected_ce,
        codebook_usage_entropy: h,
        codes_used: hist.iter().filter(|&&c| c > 0).count(),
        windows: windows.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirtyTokenConfig {
    pub rate: f64,
    pub steps: usize,
    pub batch: usize,
    pub seq: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirtyTokenRecord {
    pub rate: f64,
    pub seed: u64,
    pub bwarea_before: f64,
    pub bwarea_after: f64,
    pub baseline_before: f64,
    pub baseline_after: f64,
    pub inverse_checksum_before: u64,
    pub inverse_checksum_after: u64,
}

impl DirtyTokenRecord {
    pub fn delta_bwarea(&self) -> f64 {
        self.bwarea_after - self.bwarea_before
    }

    pub fn delta_baseline(&self) -> f64 {
        self.baseline_after - self.baseline_before
    }

    /// Positive when the baseline degrades more than the BWArea arm.
    pub fn advantage(&self) -> f64 {
        self.delta_baseline() - self.delta_bwarea()
    }
}

/// Fine-tunes the world model (inverse frozen) and the baseline on a
/// corrupted copy of `shard`, and reports clean held-out CE before and after.
pub fn dirty_token_experiment<T: Real>(
    models: &Models<T>,
    shard: &Corpus,
    heldout: &[Vec<usize>],
    cfg: &DirtyTokenConfig,
) -> Result<DirtyTokenRecord> {
    let dirty = corrupt_corpus(shard, &Vocabulary::byte_level(), cfg.rate, cfg.seed)?;
    let mut m = models.clone();
    let inverse_before = m.inverse.checksum();
    let bwarea_before = score_world(&m, heldout)?.cross_entropy;
    let baseline_before = score_baseline(&m, heldout)?.cross_entropy;
    let mut sampler = SegmentSampler::new(&dirty, cfg.seq, cfg.batch, cfg.seed)?;
    let mut ow = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut ob = Adam::new(AdamConfig::with_lr(cfg.lr));
    for step in 1..=cfg.steps as u64 {
        let b = WeightedBatch::from(&sampler.next_batch());
        world_finetune_step(&mut m, &mut ow, &b, step)?;
        baseline_step(&mut m, &mut ob, &b, step)?;
    }
    Ok(DirtyTokenRecord {
        rate: cfg.rate,
        seed: cfg.seed,
        bwarea_before,
        bwarea_after: score_world(&m, heldout)?.cross_entropy,
        baseline_before,
        baseline_after: score_baseline(&m, heldout)?.cross_entropy,
        inverse_checksum_before: inverse_before,
        inverse_checksum_after: m.inverse.checksum(),
    })
}

/// Return of one episode when every answer is a greedy roll-out.
pub fn greedy_game_return<T: Real>(models: &Models<T>, game: &DecisionGame, max_len: usize) -> Result<f64> {
    let v = Vocabulary::byte_level();
    let r = play_episode(game, None, |_, prompt| {
        let t = rollout(models, &v.prompt(prompt), &RolloutOptions::greedy(max_len))?;
        v.decode(&t.generated)
    })?;
    Ok(r.total_return)
}

/// The same for the token-level baseline.
pub fn baseline_game_return<T: Real>(models: &Models<T>, game: &DecisionGame, max_len: usize) -> Result<f64> {
    let v = Vocabulary::byte_level();
    let r = play_episode(game, None, |_, prompt| {
        let t = baseline_rollout(models, &v.prompt(prompt), &RolloutOptions::greedy(max_len))?;
        v.decode(&t.generated)
    })?;
    Ok(r.total_return)
}

/// Policy mass on actions whose most likely next token is `token`: the chance
/// that an action-sampled, token-greedy roll-out emits it next.
pub fn action_success_probability<T: Real>(models: &Models<T>, prompt: &[usize], token: usize) -> Result<f64> {
    let (policy, per_action) = next_step_tables(models, prompt)?;
    Ok(per_action
        .iter()
        .zip(&policy)
        .filter(|(row, _)| argmax(row) == token)
        .fold(0.0, |acc, (_, lp)| acc + lp.exp()))
}

/// `Σ_a π(a) p(token | a)` at the next position.
pub fn mixture_token_probability<T: Real>(models: &Models<T>, prompt: &[usize], token: usize) -> Result<f64> {
    let (policy, per_action) = next_step_tables(models, prompt)?;
    Ok(per_action.iter().zip(&policy).map(|(row, lp)| (lp + row[token]).exp()).sum())
}

fn next_step_tables<T: Real>(models: &Models<T>, prompt: &[usize]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let prefix = models.infer_actions(prompt)?;
    let per_action = models.world_final_step_all_actions(prompt, &prefix)?;
    let policy = models
        .policy_log_probs(prompt)?
        .pop()
        .ok_or_else(|| CoreError::Contract("empty prompt".into()))?;
    Ok((policy, per_action))
}
