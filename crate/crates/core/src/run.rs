//! Config-driven execution of one stage: loading inputs and checkpoints,
//! guarding stage order, the training loops, logging and checkpoint output.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bwarea_tensor::{kernels, Adam, AdamConfig, ParamStore, Real};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{config_hash, Checkpoint, DirLock, Provenance, StageRecord};
use crate::data::{load_sft_records, sft_epochs, Corpus, SegmentSampler, Vocabulary};
use crate::env::{DecisionGame, GameReward, PersuasionReward, RewardFunction, ScriptedResponder};
use crate::error::{CoreError, Result};
use crate::eval::{eval_lm, greedy_game_return, baseline_game_return, heldout_windows, EvalReport};
use crate::generate::{export_traces, rollout, RolloutOptions};
use crate::model::{ModelConfig, Models};
use crate::toy::PERSUASION_PROMPT;
use crate::train::{
    baseline_rl_update, baseline_step, pretrain_step1, pretrain_step2, rl_update, sft_step, DeadCodeMonitor,
    LossReport, RunLog, SftPart, Stage, TrainConfig, WeightedBatch,
};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    /// Each non-empty line is a document.
    #[default]
    Lines,
    /// The whole file is one document.
    Document,
    /// Pre-tokenized binary written by `Corpus::write_binary`.
    Binary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: Option<PathBuf>,
    pub corpus_format: CorpusFormat,
    pub sft_data: Option<PathBuf>,
    pub checkpoint_in: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    /// Defaults to `<checkpoint_dir>/<stage>.ndjson`.
    pub log: Option<PathBuf>,
    pub traces: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: None,
            corpus_format: CorpusFormat::Lines,
            sft_data: None,
            checkpoint_in: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            log: None,
            traces: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    #[default]
    Game,
    Persuasion,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    pub reward: RewardKind,
    /// A bundled game name or a path to a game file.
    pub game: String,
    pub persuasion_rules: Option<PathBuf>,
    /// Copies of each prompt per update.
    pub repeats: usize,
    pub eval_every: usize,
    /// Stop once the greedy return reaches the game's optimum.
    pub stop_at_optimal: bool,
    /// Train the token-level baseline with the same reward alongside.
    pub baseline_arm: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self {
            reward: RewardKind::Game,
            game: "custom".into(),
            persuasion_rules: None,
            repeats: 2,
            eval_every: 10,
            stop_at_optimal: true,
            baseline_arm: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub heldout_fraction: f64,
    pub max_windows: usize,
    pub mixture_windows: usize,
    pub report: Option<PathBuf>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            heldout_fraction: 0.05,
            max_windows: 256,
            mixture_windows: 64,
            report: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerateConfig {
    pub prompt: String,
    pub max_len: usize,
    pub greedy: bool,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        Self {
            prompt: String::new(),
            max_len: 64,
            greedy: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub stage: Stage,
    /// Also train the baseline during pre-training and SFT.
    pub train_baseline: bool,
    /// Save an intermediate checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: usize,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub rl: RlConfig,
    pub eval: EvalConfig,
    pub generate: GenerateConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Pretrain1,
            train_baseline: true,
            checkpoint_every: 0,
            paths: PathsConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            rl: RlConfig::default(),
            eval: EvalConfig::default(),
            generate: GenerateConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            CoreError::Parse {
                path: origin.to_string(),
                line: e.span().map_or(0, |s| crate::env::line_of(text, s.start)),
                msg: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hash of everything that shapes each update. Step budgets and logging
    /// are left out so a run can be extended.
    pub fn hash(&self) -> String {
        let train = TrainConfig {
            pretrain_steps: 0,
            bc_steps: 0,
            sft_epochs: 0,
            rl_iterations: 0,
            log_every: 0,
            ..self.train.clone()
        };
        config_hash(&(&self.model, &train, self.train_baseline))
    }

    /// Checks values and that the inputs this stage reads exist.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        let need = |p: &Option<PathBuf>, what: &str| -> Result<()> {
            match p {
                None => Err(CoreError::Config(format!("stage {} needs paths.{what}", self.stage))),
                Some(p) if !p.exists() => Err(CoreError::Config(format!(
                    "paths.{what} {} does not exist",
                    p.display()
                ))),
                Some(_) => Ok(()),
            }
        };
        match self.stage {
            Stage::Pretrain1 | Stage::Pretrain2 => need(&self.paths.corpus, "corpus")?,
            Stage::Sft => need(&self.paths.sft_data, "sft_data")?,
            Stage::Eval => {
                need(&self.paths.corpus, "corpus")?;
                need(&self.paths.checkpoint_in, "checkpoint_in")?;
            }
            Stage::Rl | Stage::Generate | Stage::Probe => need(&self.paths.checkpoint_in, "checkpoint_in")?,
        }
        if let Some(p) = &self.paths.checkpoint_in {
            if !p.exists() {
                return Err(CoreError::Config(format!("paths.checkpoint_in {} does not exist", p.display())));
            }
        }
        if !(0.0..1.0).contains(&self.eval.heldout_fraction) {
            return Err(CoreError::Config(format!(
                "eval.heldout_fraction must be in [0, 1), got {}",
                self.eval.heldout_fraction
            )));
        }
        if self.rl.repeats == 0 {
            return Err(CoreError::Config("rl.repeats must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Skip the stage-order and config-hash guards.
    pub force: bool,
    /// Single-threaded reference kernels.
    pub deterministic: bool,
}

#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub stage: Option<Stage>,
    pub steps: u64,
    pub last: Option<LossReport>,
    pub eval: Option<EvalReport>,
    /// `(iteration, greedy return)` for the latent-action policy.
    pub returns: Vec<(u64, f64)>,
    pub baseline_returns: Vec<(u64, f64)>,
    pub text: Option<String>,
    pub checkpoint: Option<PathBuf>,
}

pub fn load_corpus(vocab: &Vocabulary, path: &Path, format: CorpusFormat) -> Result<Corpus> {
    match format {
        CorpusFormat::Lines => Corpus::load_text(vocab, path, true),
        CorpusFormat::Document => Corpus::load_text(vocab, path, false),
        CorpusFormat::Binary => {
            let f = fs::File::open(path).map_err(|e| CoreError::io(path, e))?;
            Corpus::read_binary(vocab, std::io::BufReader::new(f))
        }
    }
}

pub fn load_game(spec: &str) -> Result<DecisionGame> {
    if crate::env::BUNDLED_GAMES.contains(&spec) {
        DecisionGame::bundled(spec)
    } else {
        DecisionGame::load(Path::new(spec))
    }
}

struct Session {
    models: Models<f32>,
    provenance: Provenance,
    /// Completed steps when resuming the same stage.
    resume_from: u64,
    optimizer: Option<Adam<f32>>,
}

fn open_session(cfg: &RunConfig, opts: &RunOptions) -> Result<Session> {
    let Some(path) = &cfg.paths.checkpoint_in else {
        return Ok(Session {
            models: Models::init(cfg.model, cfg.train.seed)?,
            provenance: Provenance::default(),
            resume_from: 0,
            optimizer: None,
        });
    };
    let ck = Checkpoint::load(path)?;
    if ck.header.model != cfg.model {
        if !opts.force {
            return Err(CoreError::Validation(format!(
                "{} was saved with a different model config; pass --force to use the checkpoint's",
                path.display()
            )));
        }
        warn!("using the model config stored in {}", path.display());
    }
    let models = ck.models()?;
    let provenance = ck.header.provenance.clone();
    let trains = matches!(cfg.stage, Stage::Pretrain1 | Stage::Pretrain2 | Stage::Sft | Stage::Rl);
    if trains && !opts.force {
        provenance.check_can_start(cfg.stage)?;
    }
    let mut resume_from = 0;
    let mut optimizer = None;
    if let Some(last) = provenance.last().filter(|r| r.stage == cfg.stage && trains) {
        if last.config_hash != cfg.hash() {
            if !opts.force {
                return Err(CoreError::Validation(format!(
                    "resuming {} with config hash {} but the checkpoint has {}; pass --force to continue anyway",
                    cfg.stage,
                    cfg.hash(),
                    last.config_hash
                )));
            }
            warn!("config hash changed since the checkpoint; continuing");
        }
        resume_from = last.steps;
        optimizer = ck.optimizer();
        info!("resuming {} after step {resume_from}", cfg.stage);
    }
    Ok(Session {
        models,
        provenance,
        resume_from,
        optimizer,
    })
}

/// Splits one saved optimizer into per-model optimizers by parameter prefix.
fn split_optimizer(saved: Option<&Adam<f32>>, lr: f64, prefixes: &[&[&str]]) -> Vec<Adam<f32>> {
    prefixes
        .iter()
        .map(|ps| match saved {
            Some(a) => {
                let moments: BTreeMap<_, _> = a
                    .moments()
                    .iter()
                    .filter(|(k, _)| ps.iter().any(|p| k.starts_with(p)))
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                Adam::from_parts(AdamConfig { learning_rate: lr, ..a.config }, a.step_count(), moments)
            }
            None => Adam::new(AdamConfig::with_lr(lr)),
        })
        .collect()
}

fn merge_optimizers(parts: &[&Adam<f32>]) -> Adam<f32> {
    let mut moments = BTreeMap::new();
    for a in parts {
        moments.extend(a.moments().iter().map(|(k, v)| (k.clone(), v.clone())));
    }
    Adam::from_parts(parts[0].config, parts[0].step_count(), moments)
}

struct Output<'a> {
    cfg: &'a RunConfig,
    log: RunLog,
    provenance: Provenance,
}

impl Output<'_> {
    fn record(&mut self, r: &LossReport) -> Result<()> {
        self.log.record(r)?;
        if self.cfg.train.log_every > 0 && r.step.is_multiple_of(self.cfg.train.log_every as u64) {
            info!(
                "{} step {}: total {:.4} predict {:.4} bc {:.4} lm {:.4} reward {:.3}",
                r.stage, r.step, r.total, r.predict, r.policy_bc, r.lm, r.mean_reward
            );
        }
        Ok(())
    }

    fn provenance_at(&self, steps: u64) -> Provenance {
        let mut p = self.provenance.clone();
        if p.last().is_some_and(|r| r.stage == self.cfg.stage) {
            p.history.pop();
        }
        p.history.push(StageRecord {
            stage: self.cfg.stage,
            steps,
            seed: self.cfg.train.seed,
            config_hash: self.cfg.hash(),
        });
        p
    }

    fn save(&self, models: &Models<f32>, opt: &Adam<f32>, steps: u64, name: &str) -> Result<PathBuf> {
        let path = self.cfg.paths.checkpoint_dir.join(name);
        Checkpoint::new(models, self.provenance_at(steps), Some(opt)).save(&path)?;
        Ok(path)
    }

    fn maybe_save(&self, models: &Models<f32>, opt: &Adam<f32>, step: u64) -> Result<()> {
        let every = self.cfg.checkpoint_every as u64;
        if every > 0 && step.is_multiple_of(every) {
            self.save(models, opt, step, &format!("{}.bwa", self.cfg.stage))?;
        }
        Ok(())
    }
}

/// Saves the models next to the normal output before surfacing a
/// non-finite loss, so the failing state can be inspected.
fn on_failure<T>(out: &Output<'_>, models: &Models<f32>, step: u64, r: Result<T>) -> Result<T> {
    if let Err(CoreError::NonFiniteLoss { .. }) = &r {
        let name = format!("{}.nonfinite.bwa", out.cfg.stage);
        match out.save(models, &Adam::new(AdamConfig::default()), step, &name) {
            Ok(p) => warn!("saved the failing state to {}", p.display()),
            Err(e) => warn!("could not save the failing state: {e}"),
        }
    }
    r
}

/// Executes the configured stage.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunSummary> {
    cfg.validate()?;
    if cfg.stage == Stage::Probe {
        return Err(CoreError::Config("probe is interactive; start it from the command line".into()));
    }
    kernels::set_reference_mode(opts.deterministic);
    let session = open_session(cfg, opts)?;
    let mut summary = RunSummary {
        stage: Some(cfg.stage),
        ..RunSummary::default()
    };
    match cfg.stage {
        Stage::Eval => {
            summary.eval = Some(run_eval(cfg, &session.models)?);
            return Ok(summary);
        }
        Stage::Generate => {
            summary.text = Some(run_generate(cfg, &session.models)?);
            return Ok(summary);
        }
        _ => {}
    }
    let _lock = DirLock::acquire(&cfg.paths.checkpoint_dir)?;
    let log_path = cfg
        .paths
        .log
        .clone()
        .unwrap_or_else(|| cfg.paths.checkpoint_dir.join(format!("{}.ndjson", cfg.stage)));
    let mut out = Output {
        cfg,
        log: RunLog::open(&log_path)?,
        provenance: session.provenance.clone(),
    };
    match cfg.stage {
        Stage::Pretrain1 | Stage::Pretrain2 => run_pretrain(cfg, session, &mut out, &mut summary)?,
        Stage::Sft => run_sft(cfg, session, &mut out, &mut summary)?,
        Stage::Rl => run_rl(cfg, session, &mut out, &mut summary)?,
        _ => unreachable!("handled above"),
    }
    Ok(summary)
}

fn run_pretrain(cfg: &RunConfig, s: Session, out: &mut Output<'_>, summary: &mut RunSummary) -> Result<()> {
    let tc = &cfg.train;
    let vocab = Vocabulary::byte_level();
    let corpus = load_corpus(&vocab, cfg.paths.corpus.as_deref().expect("validated"), cfg.paths.corpus_format)?;
    let (train, _) = corpus.split_heldout(cfg.eval.heldout_fraction);
    let mut sampler = SegmentSampler::new(&train, tc.seq_len, tc.batch_size, tc.seed)?;
    let mut models = s.models;
    let first = cfg.stage == Stage::Pretrain1;
    let (total, main_prefixes): (u64, &[&str]) = if first {
        (tc.pretrain_steps as u64, &["world.", "inverse."])
    } else {
        (tc.bc_steps as u64, &["policy."])
    };
    let mut opts = split_optimizer(s.optimizer.as_ref(), tc.lr_pretrain, &[main_prefixes, &["baseline."]]);
    let mut base_opt = opts.pop().expect("two optimizers");
    let mut opt = opts.pop().expect("two optimizers");
    let mut monitor =
        (first && tc.dead_code_steps > 0).then(|| DeadCodeMonitor::new(models.config.n_codes, tc.dead_code_steps, tc.seed));
    let with_baseline = first && cfg.train_baseline;
    for _ in 0..s.resume_from {
        sampler.next_batch();
    }
    for step in s.resume_from + 1..=total {
        let batch = WeightedBatch::from(&sampler.next_batch());
        let r = if first {
            pretrain_step1(&mut models, &mut opt, &batch, tc, step, monitor.as_mut())
        } else {
            pretrain_step2(&mut models, &mut opt, &batch, step)
        };
        let r = on_failure(out, &models, step, r)?;
        out.record(&r)?;
        if with_baseline {
            let b = baseline_step(&mut models, &mut base_opt, &batch, step);
            let b = on_failure(out, &models, step, b)?;
            out.record(&b)?;
        }
        summary.last = Some(r);
        out.maybe_save(&models, &merge_optimizers(&[&opt, &base_opt]), step)?;
    }
    summary.steps = total;
    let name = format!("{}.bwa", cfg.stage);
    summary.checkpoint = Some(out.save(&models, &merge_optimizers(&[&opt, &base_opt]), total, &name)?);
    Ok(())
}

fn run_sft(cfg: &RunConfig, s: Session, out: &mut Output<'_>, summary: &mut RunSummary) -> Result<()> {
    let tc = &cfg.train;
    let vocab = Vocabulary::byte_level();
    let records = load_sft_records(cfg.paths.sft_data.as_deref().expect("validated"))?;
    let batches = sft_epochs(&vocab, &records, tc.batch_size, tc.sft_max_len, tc.sft_epochs, tc.seed)?;
    let jobs: Vec<(SftPart, &crate::data::SftBatch)> = [SftPart::WorldInverse, SftPart::Policy]
        .into_iter()
        .flat_map(|part| batches.iter().map(move |b| (part, b)))
        .collect();
    let mut models = s.models;
    let mut opts = split_optimizer(
        s.optimizer.as_ref(),
        tc.lr_sft,
        &[&["world.", "inverse."], &["policy."], &["baseline."]],
    );
    let mut base_opt = opts.pop().expect("three optimizers");
    let mut pol_opt = opts.pop().expect("three optimizers");
    let mut wi_opt = opts.pop().expect("three optimizers");
    for (i, (part, batch)) in jobs.iter().enumerate().skip(s.resume_from as usize) {
        let step = i as u64 + 1;
        let opt = match part {
            SftPart::WorldInverse => &mut wi_opt,
            SftPart::Policy => &mut pol_opt,
        };
        let r = sft_step(&mut models, opt, batch, tc, *part, step);
        let r = on_failure(out, &models, step, r)?;
        out.record(&r)?;
        if cfg.train_baseline && *part == SftPart::WorldInverse {
            let wb = WeightedBatch::from(*batch);
            let b = baseline_step(&mut models, &mut base_opt, &wb, step);
            let b = on_failure(out, &models, step, b)?;
            out.record(&b)?;
        }
        summary.last = Some(r);
        out.maybe_save(&models, &merge_optimizers(&[&wi_opt, &pol_opt, &base_opt]), step)?;
    }
    summary.steps = jobs.len() as u64;
    let merged = merge_optimizers(&[&wi_opt, &pol_opt, &base_opt]);
    summary.checkpoint = Some(out.save(&models, &merged, summary.steps, "sft.bwa")?);
    Ok(())
}

fn run_rl(cfg: &RunConfig, s: Session, out: &mut Output<'_>, summary: &mut RunSummary) -> Result<()> {
    let tc = &cfg.train;
    let vocab = Vocabulary::byte_level();
    let (reward, base_prompts, game): (Box<dyn RewardFunction>, Vec<Vec<usize>>, Option<DecisionGame>) =
        match cfg.rl.reward {
            RewardKind::Game => {
                let game = load_game(&cfg.rl.game)?;
                let r = GameReward::new(game.clone());
                let prompts = r.prompts();
                (Box::new(r), prompts, Some(game))
            }
            RewardKind::Persuasion => {
                let responder = match &cfg.rl.persuasion_rules {
                    Some(p) => {
                        let text = fs::read_to_string(p).map_err(|e| CoreError::io(p, e))?;
                        ScriptedResponder::parse(&text, &p.display().to_string())?
                    }
                    None => ScriptedResponder::default(),
                };
                (Box::new(PersuasionReward(responder)), vec![vocab.prompt(PERSUASION_PROMPT)], None)
            }
        };
    let prompts: Vec<Vec<usize>> = base_prompts
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.clone(), cfg.rl.repeats))
        .collect();
    let mut models = s.models;
    let reference: Option<ParamStore<f32>> = (tc.kl_coef > 0.0).then(|| models.policy.clone());
    let mut opts = split_optimizer(s.optimizer.as_ref(), tc.lr_rl, &[&["policy."], &["baseline."]]);
    let mut base_opt = opts.pop().expect("two optimizers");
    let mut opt = opts.pop().expect("two optimizers");
    let optimal = game.as_ref().map(DecisionGame::optimal_return);
    let mut done_steps = tc.rl_iterations as u64;
    for step in s.resume_from + 1..=tc.rl_iterations as u64 {
        let r = rl_update(&mut models, &mut opt, &prompts, reward.as_ref(), reference.as_ref(), tc, step);
        let r = on_failure(out, &models, step, r)?;
        out.record(&r)?;
        if cfg.rl.baseline_arm {
            let b = baseline_rl_update(&mut models, &mut base_opt, &prompts, reward.as_ref(), tc, step);
            out.record(&on_failure(out, &models, step, b)?)?;
        }
        summary.last = Some(r);
        out.maybe_save(&models, &merge_optimizers(&[&opt, &base_opt]), step)?;
        if cfg.rl.eval_every > 0 && step % cfg.rl.eval_every as u64 == 0 {
            if let Some(g) = &game {
                let ret = greedy_game_return(&models, g, tc.gen_max_len)?;
                summary.returns.push((step, ret));
                if cfg.rl.baseline_arm {
                    summary.baseline_returns.push((step, baseline_game_return(&models, g, tc.gen_max_len)?));
                }
                info!("rl step {step}: greedy return {ret}");
                if cfg.rl.stop_at_optimal && Some(ret) >= optimal {
                    done_steps = step;
                    break;
                }
            }
        }
    }
    summary.steps = done_steps;
    let merged = merge_optimizers(&[&opt, &base_opt]);
    summary.checkpoint = Some(out.save(&models, &merged, done_steps, "rl.bwa")?);
    Ok(())
}

fn run_eval<T: Real>(cfg: &RunConfig, models: &Models<T>) -> Result<EvalReport> {
    let vocab = Vocabulary::byte_level();
    let corpus = load_corpus(&vocab, cfg.paths.corpus.as_deref().expect("validated"), cfg.paths.corpus_format)?;
    let (_, heldout) = corpus.split_heldout(cfg.eval.heldout_fraction.max(f64::MIN_POSITIVE));
    let seq = cfg.train.seq_len.min(models.config.max_context);
    let mut windows = heldout_windows(&heldout, seq)?;
    windows.truncate(cfg.eval.max_windows);
    let report = eval_lm(models, &windows, cfg.eval.mixture_windows)?;
    if let Some(p) = &cfg.eval.report {
        fs::write(p, report.to_json()).map_err(|e| CoreError::io(p, e))?;
    }
    Ok(report)
}

fn run_generate<T: Real>(cfg: &RunConfig, models: &Models<T>) -> Result<String> {
    let vocab = Vocabulary::byte_level();
    let g = &cfg.generate;
    let opts = if g.greedy {
        RolloutOptions::greedy(g.max_len)
    } else {
        let mut o = RolloutOptions::sample(g.max_len, cfg.train.seed);
        o.temperature = cfg.train.temperature;
        o
    };
    let trace = rollout(models, &vocab.prompt(&g.prompt), &opts)?;
    if let Some(p) = &cfg.paths.traces {
        export_traces(p, std::slice::from_ref(&trace))?;
    }
    vocab.decode(&trace.generated)
}
