mod probe;

use std::path::PathBuf;
use std::process::ExitCode;

use bwarea_core::data::Vocabulary;
use bwarea_core::env::DecisionGame;
use bwarea_core::run::{run, RunConfig, RunOptions, RunSummary};
use bwarea_core::toy;
use bwarea_core::train::Stage;
use bwarea_core::{CoreError, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

/// Latent-action language model: pre-training, fine-tuning, RL and probing.
#[derive(Parser)]
#[command(name = "bwarea", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the world and inverse models (plus the baseline) on a corpus.
    Pretrain1(Common),
    /// Behavior-clone the policy against the frozen inverse model.
    Pretrain2(Common),
    /// Masked supervised fine-tuning on JSONL prompt/response records.
    Sft(Common),
    /// Policy-only reinforcement learning in action space.
    Rl(Common),
    /// Held-out metrics for a checkpoint.
    Eval(Common),
    /// Generate a continuation of `generate.prompt`.
    Generate(Common),
    /// Step through generation, pinning latent actions by hand.
    Probe(Common),
    /// Write a bundled toy dataset to disk.
    Toy(ToyArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Step budget of the stage (steps, epochs, iterations or tokens).
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    checkpoint_in: Option<PathBuf>,
    /// Directory for checkpoints and logs.
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    sft_data: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    /// Skip stage-order and config-hash checks.
    #[arg(long)]
    force: bool,
    /// Single-threaded reference kernels for bit-reproducible runs.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyKind {
    /// Grammar sentences as a binary corpus (`corpus_format = "binary"`).
    Grammar,
    /// "pick A" / "pick B" documents as a binary corpus.
    Bandit,
    /// SFT records for a bundled game (see --game).
    Game,
    /// SFT records for the persuasion task.
    Persuasion,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(value_enum)]
    kind: ToyKind,
    out: PathBuf,
    /// Corpus size in tokens, documents or records per state.
    #[arg(long, default_value_t = 200_000)]
    size: usize,
    #[arg(long, default_value = "custom")]
    game: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn config(&self, stage: Stage) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.stage = stage;
        if let Some(s) = self.seed {
            c.train.seed = s;
        }
        if let Some(n) = self.steps {
            match stage {
                Stage::Pretrain1 => c.train.pretrain_steps = n,
                Stage::Pretrain2 => c.train.bc_steps = n,
                Stage::Sft => c.train.sft_epochs = n,
                Stage::Rl => c.train.rl_iterations = n,
                Stage::Generate | Stage::Probe => c.generate.max_len = n,
                Stage::Eval => c.eval.max_windows = n,
            }
        }
        if let Some(p) = &self.checkpoint_in {
            c.paths.checkpoint_in = Some(p.clone());
        }
        if let Some(p) = &self.checkpoint_out {
            c.paths.checkpoint_dir = p.clone();
        }
        if let Some(p) = &self.corpus {
            c.paths.corpus = Some(p.clone());
        }
        if let Some(p) = &self.sft_data {
            c.paths.sft_data = Some(p.clone());
        }
        if let Some(p) = &self.prompt {
            c.generate.prompt = p.clone();
        }
        Ok(c)
    }

    fn options(&self) -> RunOptions {
        RunOptions {
            force: self.force,
            deterministic: self.deterministic,
        }
    }
}

fn write_toy(a: &ToyArgs) -> Result<()> {
    let vocab = Vocabulary::byte_level();
    let io = |e| CoreError::io(&a.out, e);
    let corpus = match a.kind {
        ToyKind::Grammar => toy::grammar_corpus(&vocab, a.size, a.seed),
        ToyKind::Bandit => toy::bandit_corpus(&vocab, a.size, a.seed),
        ToyKind::Game => {
            let game = DecisionGame::bundled(&a.game)?;
            let text = jsonl(&toy::game_records(&game, a.size.min(64), a.seed));
            return std::fs::write(&a.out, text).map_err(io);
        }
        ToyKind::Persuasion => {
            let text = jsonl(&toy::persuasion_records(a.size.min(64)));
            return std::fs::write(&a.out, text).map_err(io);
        }
    };
    let f = std::fs::File::create(&a.out).map_err(io)?;
    let mut w = std::io::BufWriter::new(f);
    corpus.write_binary(&mut w).map_err(io)?;
    std::io::Write::flush(&mut w).map_err(io)
}

fn jsonl<S: serde::Serialize>(records: &[S]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("records serialize") + "\n")
        .collect()
}

fn report(s: &RunSummary) {
    if let Some(r) = &s.last {
        println!("{}", serde_json::to_string(r).unwrap_or_default());
    }
    if let Some((it, ret)) = s.returns.last() {
        println!("greedy return {ret} at iteration {it}");
    }
    if let Some((it, ret)) = s.baseline_returns.last() {
        println!("baseline return {ret} at iteration {it}");
    }
    if let Some(e) = &s.eval {
        println!("{}", e.table());
    }
    if let Some(t) = &s.text {
        println!("{t}");
    }
    if let Some(p) = &s.checkpoint {
        println!("checkpoint {}", p.display());
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    let (stage, common) = match &cli.command {
        Command::Toy(a) => return write_toy(a),
        Command::Pretrain1(c) => (Stage::Pretrain1, c),
        Command::Pretrain2(c) => (Stage::Pretrain2, c),
        Command::Sft(c) => (Stage::Sft, c),
        Command::Rl(c) => (Stage::Rl, c),
        Command::Eval(c) => (Stage::Eval, c),
        Command::Generate(c) => (Stage::Generate, c),
        Command::Probe(c) => (Stage::Probe, c),
    };
    let cfg = common.config(stage)?;
    if stage == Stage::Probe {
        return probe::repl(&cfg, std::io::stdin().lock(), std::io::stdout().lock());
    }
    report(&run(&cfg, &common.options())?);
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("BWAREA_LOG", "info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
