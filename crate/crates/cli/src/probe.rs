//! Interactive action probe: shows the policy's top actions at each step
//! and lets the user pin one before the world model emits the next token.

use std::io::{BufRead, Write};

use bwarea_core::checkpoint::Checkpoint;
use bwarea_core::data::Vocabulary;
use bwarea_core::generate::{probe_actions, top_actions, ActionOverride};
use bwarea_core::run::RunConfig;
use bwarea_core::{CoreError, Result};

const TOP_K: usize = 5;

pub fn repl(cfg: &RunConfig, input: impl BufRead, mut out: impl Write) -> Result<()> {
    let path = cfg.paths.checkpoint_in.as_ref().ok_or_else(|| CoreError::Config("probe needs --checkpoint-in".into()))?;
    let models = Checkpoint::load(path)?.models()?;
    let vocab = Vocabulary::byte_level();
    let io = |e| CoreError::io(path, e);
    let mut lines = input.lines();

    writeln!(out, "prompt (empty line uses generate.prompt):").map_err(io)?;
    let first = lines.next().transpose().map_err(io)?.unwrap_or_default();
    let text = if first.is_empty() { cfg.generate.prompt.clone() } else { first };
    let mut seq = vocab.prompt(&text);
    let mut generated = 0;
    while generated < cfg.generate.max_len {
        let top = top_actions(&models, &seq, TOP_K)?;
        let shown: Vec<String> = top.iter().map(|(a, p)| format!("{a}:{p:.3}")).collect();
        writeln!(out, "[{}] {}", vocab.decode(&seq)?, shown.join(" ")).map_err(io)?;
        write!(out, "action (enter = policy, q = quit)> ").map_err(io)?;
        out.flush().map_err(io)?;
        let Some(line) = lines.next().transpose().map_err(io)? else {
            writeln!(out).map_err(io)?;
            break;
        };
        let line = line.trim();
        if line == "q" {
            writeln!(out).map_err(io)?;
            break;
        }
        let action = if line.is_empty() {
            top[0].0
        } else {
            match line.parse::<usize>() {
                Ok(a) => a,
                Err(_) => {
                    writeln!(out, "not an action index: {line}").map_err(io)?;
                    continue;
                }
            }
        };
        let next = match probe_actions(&models, &seq, &ActionOverride::PerStep(vec![action]), 1) {
            Ok(t) => t,
            Err(e @ CoreError::ActionRange { .. }) => {
                writeln!(out, "{e}").map_err(io)?;
                continue;
            }
            Err(e) => return Err(e),
        };
        let Some(&tok) = next.first() else { break };
        writeln!(out, "action {action} -> {}", vocab.token_str(tok)).map_err(io)?;
        seq.push(tok);
        generated += 1;
        if tok == vocab.eos || seq.len() >= models.config.max_context {
            break;
        }
    }
    writeln!(out, "{}", vocab.decode(&seq)?).map_err(io)?;
    Ok(())
}
