mod common;

use std::collections::HashMap;

use bwarea_core::data::{SegmentSampler, SftBatch, SftRecord, Vocabulary};
use bwarea_core::env::{FirstTokenReward, RewardError};
use bwarea_core::model::{ModelKind, Models};
use bwarea_core::toy;
use bwarea_core::train::*;
use bwarea_core::CoreError;
use bwarea_tensor::{Adam, AdamConfig, Tensor};

fn sums(m: &Models<f32>) -> [u64; 4] {
    ModelKind::ALL.map(|k| m.store(k).checksum())
}

fn changed(before: [u64; 4], m: &Models<f32>) -> Vec<ModelKind> {
    ModelKind::ALL
        .into_iter()
        .zip(before)
        .filter(|(k, s)| m.store(*k).checksum() != *s)
        .map(|(k, _)| k)
        .collect()
}

fn batch() -> WeightedBatch {
    WeightedBatch::from(&common::grammar_batch(4, 16, 1))
}

fn opt() -> Adam<f32> {
    Adam::new(AdamConfig::with_lr(1e-2))
}

#[test]
fn pretraining_stages_touch_only_their_own_parameters() {
    let tc = TrainConfig::default();
    let mut m = common::tiny_models::<f32>(1);
    let before = sums(&m);
    pretrain_step1(&mut m, &mut opt(), &batch(), &tc, 1, None).unwrap();
    assert_eq!(changed(before, &m), vec![ModelKind::World, ModelKind::Inverse]);

    let before = sums(&m);
    pretrain_step2(&mut m, &mut opt(), &batch(), 1).unwrap();
    assert_eq!(changed(before, &m), vec![ModelKind::Policy]);

    let before = sums(&m);
    baseline_step(&mut m, &mut opt(), &batch(), 1).unwrap();
    assert_eq!(changed(before, &m), vec![ModelKind::Baseline]);

    let before = sums(&m);
    world_finetune_step(&mut m, &mut opt(), &batch(), 1).unwrap();
    assert_eq!(changed(before, &m), vec![ModelKind::World]);
}

#[test]
fn rl_touches_only_the_policy() {
    let v = Vocabulary::byte_level();
    let mut m = common::tiny_models::<f32>(2);
    let tc = TrainConfig {
        gen_max_len: 3,
        ..TrainConfig::default()
    };
    // Reward depends on the first token, so sampled and greedy roll-outs differ.
    let reward = |_: &[usize], g: &[usize]| -> Result<f64, RewardError> { Ok(g.first().map_or(0.0, |&t| t as f64)) };
    let prompts = vec![v.prompt("hi "); 6];
    let before = sums(&m);
    let mut updated = false;
    for step in 1..=5 {
        let r = rl_update(&mut m, &mut opt(), &prompts, &reward, None, &tc, step).unwrap();
        updated |= !r.skipped;
        assert_eq!(r.episodes, 6);
    }
    assert!(updated);
    assert_eq!(changed(before, &m), vec![ModelKind::Policy]);

    let before = sums(&m);
    baseline_rl_update(&mut m, &mut opt(), &prompts, &reward, &tc, 1).unwrap();
    assert_eq!(changed(before, &m), vec![ModelKind::Baseline]);
}

#[test]
fn zero_advantage_skips_the_update() {
    let v = Vocabulary::byte_level();
    let mut m = common::tiny_models::<f32>(3);
    let tc = TrainConfig {
        gen_max_len: 2,
        ..TrainConfig::default()
    };
    let constant = |_: &[usize], _: &[usize]| -> Result<f64, RewardError> { Ok(1.0) };
    let before = sums(&m);
    let r = rl_update(&mut m, &mut opt(), &[v.prompt("a")], &constant, None, &tc, 1).unwrap();
    assert!(r.skipped);
    assert_eq!(r.mean_advantage, 0.0);
    assert!(changed(before, &m).is_empty());
}

#[test]
fn failing_reward_calls_drop_their_episodes() {
    let v = Vocabulary::byte_level();
    let m = common::tiny_models::<f32>(4);
    let tc = TrainConfig {
        gen_max_len: 2,
        ..TrainConfig::default()
    };
    let bad = v.prompt("bad");
    let reward = |p: &[usize], _: &[usize]| -> Result<f64, RewardError> {
        if p.ends_with(&v.encode("bad")) {
            Err(RewardError("refused".into()))
        } else {
            Ok(0.5)
        }
    };
    let prompts = vec![v.prompt("ok"), bad.clone(), v.prompt("ok"), bad];
    let (eps, dropped) = collect_episodes(&m, &prompts, &reward, &tc, 1).unwrap();
    assert_eq!((eps.len(), dropped), (2, 2));
}

#[test]
fn fully_masked_batches_are_skipped() {
    let mut b = batch();
    b.weights.iter_mut().for_each(|w| *w = 0.0);
    let mut m = common::tiny_models::<f32>(5);
    let before = sums(&m);
    let r = pretrain_step1(&mut m, &mut opt(), &b, &TrainConfig::default(), 1, None).unwrap();
    assert!(r.skipped);
    assert!(pretrain_step2(&mut m, &mut opt(), &b, 1).unwrap().skipped);
    assert!(changed(before, &m).is_empty());
}

#[test]
fn sft_ignores_prompt_tokens() {
    let vocab = Vocabulary::byte_level();
    let rec = |p: &str| SftRecord {
        prompt: p.into(),
        answer: "ok".into(),
    };
    let a = SftBatch::from_records(&vocab, &[rec("xyz ")], 10).unwrap();
    let wb = WeightedBatch::from(&a);
    let p = 1 + 4;
    for (j, &w) in wb.weights.iter().enumerate() {
        // Target j is token j + 1; only answer tokens and eos carry weight.
        assert_eq!(w > 0.0, j + 1 >= p && j < p + 2, "target {j}");
    }
    let mut m = common::tiny_models::<f32>(6);
    let r = sft_step(&mut m, &mut opt(), &a, &TrainConfig::default(), SftPart::WorldInverse, 1).unwrap();
    assert!(r.all_finite() && !r.skipped);
    assert_eq!(r.stage, "sft");
}

#[test]
fn overfitting_a_periodic_stream_drives_the_loss_down() {
    let v = Vocabulary::byte_level();
    let corpus = toy::periodic_corpus(&v, "abcabd", 2000);
    let mut s = SegmentSampler::new(&corpus, 12, 8, 0).unwrap();
    let mut m = common::tiny_models::<f32>(7);
    let tc = TrainConfig::default();
    let mut o = Adam::new(AdamConfig::with_lr(1e-2));
    let mut ob = Adam::new(AdamConfig::with_lr(1e-2));
    let mut first = None;
    let mut last = LossReport::default();
    let mut last_base = LossReport::default();
    for step in 1..=120 {
        let b = WeightedBatch::from(&s.next_batch());
        last = pretrain_step1(&mut m, &mut o, &b, &tc, step, None).unwrap();
        last_base = baseline_step(&mut m, &mut ob, &b, step).unwrap();
        first.get_or_insert(last.predict);
    }
    let first = first.unwrap();
    assert!(last.predict < 0.25 * first, "{first} -> {}", last.predict);
    assert!(last_base.lm < 1.0, "baseline {}", last_base.lm);
    assert!(last.all_finite());
}

#[test]
fn non_finite_loss_is_reported_with_the_step() {
    let mut m = common::tiny_models::<f32>(8);
    m.world.get_mut("world.head.w").unwrap().data_mut()[0] = f32::NAN;
    let err = pretrain_step1(&mut m, &mut opt(), &batch(), &TrainConfig::default(), 17, None).unwrap_err();
    assert!(matches!(err, CoreError::NonFiniteLoss { step: 17, .. }), "{err}");
}

#[test]
fn dead_codes_are_reseeded_from_encodings() {
    let mut mon = DeadCodeMonitor::new(4, 3, 0);
    let enc = Tensor::<f32>::from_fn(&[2, 2], |i| 10.0 + i as f32);
    let mut cb = Tensor::<f32>::zeros(&[4, 2]);
    for step in 1..=2 {
        assert!(mon.observe(step, &[0, 1], &enc, &mut cb).is_empty());
    }
    let re = mon.observe(3, &[0, 1], &enc, &mut cb);
    assert_eq!(re, vec![2, 3]);
    for c in [2, 3] {
        assert!(cb.row(c) == enc.row(0) || cb.row(c) == enc.row(1));
    }
    assert_eq!(cb.row(0), &[0.0, 0.0]);
}

#[test]
fn train_config_rejects_bad_values() {
    let bad = TrainConfig {
        beta: 0.0,
        ..TrainConfig::default()
    };
    assert!(matches!(bad.validate(), Err(CoreError::Config(_))));
    assert!(TrainConfig::default().validate().is_ok());
}

#[test]
fn loss_log_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.ndjson");
    let mut log = RunLog::open(&path).unwrap();
    let mut m = common::tiny_models::<f32>(9);
    let mut o = opt();
    let mut reports = Vec::new();
    for step in 1..=3 {
        let r = pretrain_step1(&mut m, &mut o, &batch(), &TrainConfig::default(), step, None).unwrap();
        log.record(&r).unwrap();
        reports.push(r);
    }
    drop(log);
    assert_eq!(read_log(&path).unwrap(), reports);
}

#[test]
fn first_token_reward_table() {
    let r = FirstTokenReward {
        table: HashMap::from([(65, 1.0)]),
        otherwise: -1.0,
    };
    use bwarea_core::env::RewardFunction;
    assert_eq!(r.score(&[], &[65, 1]).unwrap(), 1.0);
    assert_eq!(r.score(&[], &[66]).unwrap(), -1.0);
    assert_eq!(r.score(&[], &[]).unwrap(), -1.0);
}

#[test]
fn reported_total_is_prediction_plus_weighted_vq_terms() {
    let tc = TrainConfig {
        beta: 0.4,
        ..TrainConfig::default()
    };
    let mut m = common::tiny_models::<f64>(21);
    let r = pretrain_step1(&mut m, &mut Adam::new(AdamConfig::with_lr(1e-3)), &batch(), &tc, 1, None).unwrap();
    let expect = r.predict + tc.beta * (r.commitment + r.codebook);
    assert!((r.total - expect).abs() < 1e-6, "{} vs {expect}", r.total);
    assert!(r.commitment > 0.0 && r.codebook > 0.0);
}

#[test]
fn full_mask_sft_reproduces_pretraining_exactly() {
    let tc = TrainConfig::default();
    let pb = common::grammar_batch(3, 12, 22);
    let sb = SftBatch::from_pretrain(&pb);
    for part in [SftPart::WorldInverse, SftPart::Policy] {
        let (mut a, mut b) = (common::tiny_models::<f32>(22), common::tiny_models::<f32>(22));
        let (mut oa, mut ob) = (opt(), opt());
        let mut ra = match part {
            SftPart::WorldInverse => pretrain_step1(&mut a, &mut oa, &WeightedBatch::from(&pb), &tc, 1, None),
            SftPart::Policy => pretrain_step2(&mut a, &mut oa, &WeightedBatch::from(&pb), 1),
        }
        .unwrap();
        let rb = sft_step(&mut b, &mut ob, &sb, &tc, part, 1).unwrap();
        ra.stage = rb.stage.clone();
        assert_eq!(ra, rb);
        assert_eq!(sums(&a), sums(&b));
    }
}

#[test]
fn behavior_cloning_starts_near_uniform_over_codes() {
    let mut m = Models::<f32>::init(bwarea_core::model::ModelConfig::compact(), 23).unwrap();
    assert_eq!(m.config.n_codes, 64);
    let b = WeightedBatch::from(&common::grammar_batch(4, 32, 23));
    let r = pretrain_step2(&mut m, &mut opt(), &b, 1).unwrap();
    assert!((r.policy_bc - 64f64.ln()).abs() < 0.2, "{}", r.policy_bc);
}

#[test]
fn constant_codes_are_cloned_perfectly() {
    let mut m = common::tiny_models::<f32>(24);
    let cb = m.inverse.get_mut("inverse.codebook").unwrap();
    let row: Vec<f32> = cb.row(0).to_vec();
    let d = row.len();
    for (i, x) in cb.data_mut().iter_mut().enumerate() {
        *x = row[i % d];
    }
    let mut o = opt();
    let mut last = f64::INFINITY;
    for step in 1..=60 {
        let b = WeightedBatch::from(&common::grammar_batch(4, 16, step));
        last = pretrain_step2(&mut m, &mut o, &b, step).unwrap().policy_bc;
    }
    assert!(last < 0.05, "{last}");
    let tokens = common::grammar(20, 25);
    for row in m.policy_log_probs(&tokens.tokens).unwrap() {
        let best = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
        assert_eq!(best, 0);
    }
}
