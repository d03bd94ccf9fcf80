#![allow(dead_code)]

use bwarea_core::data::{Corpus, PretrainBatch, SegmentSampler, Vocabulary};
use bwarea_core::model::{ModelConfig, Models};
use bwarea_core::toy;

/// One layer per stack, small enough for finite differences.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_code: 4,
        n_codes: 8,
        n_heads: 2,
        ffn_hidden: 16,
        max_context: 24,
        ctx_layers: 1,
        dyn_layers: 1,
        inv_layers: 1,
        policy_layers: 1,
        ..ModelConfig::default()
    }
}

pub fn tiny_models<T: bwarea_tensor::Real>(seed: u64) -> Models<T> {
    Models::init(tiny_config(), seed).unwrap()
}

pub fn grammar(tokens: usize, seed: u64) -> Corpus {
    toy::grammar_corpus(&Vocabulary::byte_level(), tokens, seed)
}

pub fn grammar_batch(batch: usize, seq: usize, seed: u64) -> PretrainBatch {
    SegmentSampler::new(&grammar(4000, seed), seq, batch, seed).unwrap().next_batch()
}

use bwarea_core::data::SftBatch;
use bwarea_core::generate::{rollout, RolloutOptions, RolloutTrace};
use bwarea_core::train::{bc_loss, baseline_loss, policy_gradient_loss, stage1_loss, WeightedBatch};
use bwarea_tensor::gradcheck::{check_store_gradients, GradCheckReport};
use bwarea_tensor::nn::Binder;
use bwarea_tensor::ParamStore;

pub const LOSS_TOL: f64 = 1e-3;
const H: f64 = 1e-6;

/// First, middle and last element of every parameter.
pub fn spread_coords(store: &ParamStore<f64>) -> Vec<(String, usize)> {
    store
        .iter()
        .flat_map(|(n, t)| {
            let mut c = vec![0, t.len() / 2, t.len() - 1];
            c.dedup();
            c.into_iter().map(move |i| (n.clone(), i))
        })
        .collect()
}

/// A partially masked batch so the weights matter.
pub fn masked_batch() -> WeightedBatch {
    let vocab = Vocabulary::byte_level();
    let recs = vec![
        bwarea_core::data::SftRecord {
            prompt: "ab c".into(),
            answer: "de".into(),
        },
        bwarea_core::data::SftRecord {
            prompt: "x".into(),
            answer: "yz w".into(),
        },
    ];
    WeightedBatch::from(&SftBatch::from_records(&vocab, &recs, 8).unwrap())
}

pub fn stage1_gradcheck() -> GradCheckReport {
    let m = tiny_models::<f64>(11);
    let store = m.merged();
    let batch = masked_batch();
    let cfg = m.config;
    check_store_gradients(
        &store,
        &spread_coords(&store),
        |tape, s| {
            let b = Binder::new(s, true);
            Ok(stage1_loss(tape, &b, &b, &cfg, &batch, 0.25, 25.0).unwrap().total)
        },
        H,
    )
    .unwrap()
}

pub fn bc_gradcheck() -> GradCheckReport {
    let m = tiny_models::<f64>(12);
    let store = m.merged();
    let batch = masked_batch();
    let targets = m.infer_actions_batch(&batch.tokens, batch.batch, batch.seq).unwrap();
    let cfg = m.config;
    let coords: Vec<_> = spread_coords(&store).into_iter().filter(|(n, _)| n.starts_with("policy.")).collect();
    check_store_gradients(
        &store,
        &coords,
        |tape, s| Ok(bc_loss(tape, &Binder::new(s, true), &cfg, &batch, &targets).unwrap()),
        H,
    )
    .unwrap()
}

pub fn baseline_gradcheck() -> GradCheckReport {
    let m = tiny_models::<f64>(13);
    let store = m.merged();
    let batch = masked_batch();
    let cfg = m.config;
    let coords: Vec<_> = spread_coords(&store).into_iter().filter(|(n, _)| n.starts_with("baseline.")).collect();
    check_store_gradients(
        &store,
        &coords,
        |tape, s| Ok(baseline_loss(tape, &Binder::new(s, true), &cfg, &batch).unwrap()),
        H,
    )
    .unwrap()
}

pub fn sampled_traces(m: &Models<f64>, n: usize) -> Vec<(RolloutTrace, f64)> {
    let vocab = Vocabulary::byte_level();
    (0..n)
        .map(|i| {
            let t = rollout(m, &vocab.prompt("go "), &RolloutOptions::sample(4, i as u64)).unwrap();
            (t, i as f64 - 1.3)
        })
        .collect()
}

/// The ReMax surrogate, optionally with the KL penalty to a second policy.
pub fn rl_gradcheck(kl_coef: f64) -> GradCheckReport {
    let m = tiny_models::<f64>(14);
    let reference = tiny_models::<f64>(15).policy;
    let store = m.merged();
    let episodes = sampled_traces(&m, 3);
    let cfg = m.config;
    let coords: Vec<_> = spread_coords(&store).into_iter().filter(|(n, _)| n.starts_with("policy.")).collect();
    check_store_gradients(
        &store,
        &coords,
        |tape, s| {
            let p = Binder::new(s, true);
            Ok(policy_gradient_loss(tape, &p, Some(&reference), kl_coef, &cfg, &episodes).unwrap())
        },
        H,
    )
    .unwrap()
}

/// Exact `Σ_a π(a) p(x | a)` at a window's last position against a
/// Monte-Carlo estimate that samples actions and rescoring each with the
/// full teacher-forced world pass. Returns `(exact, mc_mean, mc_stderr)`.
pub fn mixture_vs_monte_carlo<T: bwarea_tensor::Real>(
    m: &Models<T>,
    window: &[usize],
    samples: usize,
    seed: u64,
) -> (f64, f64, f64) {
    use rand::distributions::{Distribution, WeightedIndex};
    use rand::SeedableRng;
    let terms = bwarea_core::eval::mixture_terms(m, window).unwrap();
    let exact: f64 = terms.policy.iter().zip(&terms.token_given_action).map(|(p, q)| p * q).sum();
    let t = window.len();
    let ctx = &window[..t - 1];
    let target = window[t - 1];
    let mut codes = m.infer_actions(ctx).unwrap();
    codes.push(0);
    let dist = WeightedIndex::new(&terms.policy).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<f64> = (0..samples)
        .map(|_| {
            *codes.last_mut().unwrap() = dist.sample(&mut rng);
            m.world_log_probs(ctx, &codes).unwrap()[t - 2][target].exp()
        })
        .collect();
    let n = samples as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (exact, mean, (var / n).sqrt())
}
