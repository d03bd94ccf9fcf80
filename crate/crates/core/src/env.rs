//! Multi-state decision games, a scripted persuasion responder, and the
//! reward interface used by RL.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{CoreError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rewards {
    pub correct: f64,
    pub incorrect: f64,
    pub out_of_space: f64,
}

impl Default for Rewards {
    fn default() -> Self {
        Self {
            correct: 1.0,
            incorrect: -1.0,
            out_of_space: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GameState {
    pub description: String,
    pub choices: Vec<String>,
    pub correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionGame {
    pub name: String,
    pub states: Vec<GameState>,
    pub rewards: Rewards,
}

#[derive(Serialize, Deserialize)]
struct ChoiceSpec {
    text: String,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    correct: bool,
}

#[derive(Serialize, Deserialize)]
struct StateSpec {
    description: String,
    choices: Vec<ChoiceSpec>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GameSpec {
    name: String,
    #[serde(default)]
    rewards: Rewards,
    states: Vec<StateSpec>,
}

pub const BUNDLED_GAMES: [&str; 3] = ["custom", "treasure_hunter", "dragon"];

fn bundled_text(name: &str) -> Option<&'static str> {
    match name {
        "custom" => Some(include_str!("../data/games/custom.toml")),
        "treasure_hunter" => Some(include_str!("../data/games/treasure_hunter.toml")),
        "dragon" => Some(include_str!("../data/games/dragon.toml")),
        _ => None,
    }
}

pub(crate) fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub next_state: usize,
    pub done: bool,
}

impl DecisionGame {
    pub fn bundled(name: &str) -> Result<Self> {
        let text = bundled_text(name).ok_or_else(|| CoreError::Config(format!("no bundled game named {name:?}")))?;
        Self::parse(text, &format!("<bundled {name}>"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let spec: GameSpec = toml::from_str(text).map_err(|e| CoreError::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })?;
        if spec.states.is_empty() {
            return Err(CoreError::Validation(format!("game {:?} has no states", spec.name)));
        }
        let mut states = Vec::with_capacity(spec.states.len());
        for (i, s) in spec.states.into_iter().enumerate() {
            let marked: Vec<usize> = s.choices.iter().enumerate().filter(|(_, c)| c.correct).map(|(j, _)| j).collect();
            if marked.len() != 1 {
                return Err(CoreError::Validation(format!(
                    "state {} of {:?} marks {} correct choices; exactly one is required",
                    i + 1,
                    spec.name,
                    marked.len()
                )));
            }
            states.push(GameState {
                description: s.description,
                choices: s.choices.into_iter().map(|c| c.text).collect(),
                correct: marked[0],
            });
        }
        Ok(Self {
            name: spec.name,
            states,
            rewards: spec.rewards,
        })
    }

    pub fn to_spec_string(&self) -> String {
        let spec = GameSpec {
            name: self.name.clone(),
            rewards: self.rewards,
            states: self
                .states
                .iter()
                .map(|s| StateSpec {
                    description: s.description.clone(),
                    choices: s
                        .choices
                        .iter()
                        .enumerate()
                        .map(|(j, t)| ChoiceSpec {
                            text: t.clone(),
                            correct: j == s.correct,
                        })
                        .collect(),
                })
                .collect(),
        };
        toml::to_string(&spec).expect("game spec serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_spec_string()).map_err(|e| CoreError::io(path, e))
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn optimal_return(&self) -> f64 {
        self.rewards.correct * self.states.len() as f64
    }

    /// Description followed by numbered choices and an answer cue.
    pub fn prompt_text(&self, state: usize) -> String {
        let s = &self.states[state];
        let mut out = format!("{}\n", s.description);
        for (j, c) in s.choices.iter().enumerate() {
            out.push_str(&format!("{}. {}\n", j + 1, c));
        }
        out.push_str("> ");
        out
    }

    pub fn step(&self, state: usize, answer: &str) -> StepOutcome {
        game_step(self, state, answer)
    }
}

fn normalize(s: &str) -> String {
    s.trim().trim_end_matches(['.', '!']).trim().to_lowercase()
}

/// Choice selected by an answer: a leading choice number, or the choice text
/// after trimming and case folding. A number outside the choice list selects
/// nothing.
pub fn match_choice(state: &GameState, answer: &str) -> Option<usize> {
    let a = normalize(answer);
    let digits: String = a.chars().take_while(|c| c.is_ascii_digit()).collect();
    if !digits.is_empty() {
        let n: usize = digits.parse().ok()?;
        return (1..=state.choices.len()).contains(&n).then(|| n - 1);
    }
    state.choices.iter().position(|c| normalize(c) == a)
}

pub fn game_step(game: &DecisionGame, state: usize, answer: &str) -> StepOutcome {
    let s = &game.states[state];
    match match_choice(s, answer) {
        Some(j) if j == s.correct => StepOutcome {
            reward: game.rewards.correct,
            next_state: state + 1,
            done: state + 1 == game.states.len(),
        },
        Some(_) => StepOutcome {
            reward: game.rewards.incorrect,
            next_state: state,
            done: false,
        },
        None => StepOutcome {
            reward: game.rewards.out_of_space,
            next_state: state,
            done: false,
        },
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub total_return: f64,
    pub rewards: Vec<f64>,
    pub steps: usize,
    pub done: bool,
    pub truncated: bool,
}

/// Plays from the first state with `answer(state, prompt)` until the game
/// ends or `max_steps` (default 4·N) answers have been given.
pub fn play_episode(
    game: &DecisionGame,
    max_steps: Option<usize>,
    mut answer: impl FnMut(usize, &str) -> Result<String>,
) -> Result<EpisodeResult> {
    let cap = max_steps.unwrap_or(4 * game.len());
    let mut state = 0;
    let mut rewards = Vec::new();
    let mut done = false;
    while rewards.len() < cap {
        let reply = answer(state, &game.prompt_text(state))?;
        let out = game.step(state, &reply);
        rewards.push(out.reward);
        state = out.next_state;
        if out.done {
            done = true;
            break;
        }
    }
    Ok(EpisodeResult {
        total_return: rewards.iter().sum(),
        steps: rewards.len(),
        done,
        truncated: !done,
        rewards,
    })
}

/// Rule-table stand-in for a target language model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptedResponder {
    pub triggers: Vec<String>,
    pub target_phrase: String,
    pub default_phrase: String,
}

impl Default for ScriptedResponder {
    fn default() -> Self {
        Self::parse(include_str!("../data/persuasion.toml"), "<bundled persuasion>").expect("bundled responder parses")
    }
}

impl ScriptedResponder {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CoreError::Parse {
            path: origin.to_string(),
            line: e.span().map_or(0, |s| line_of(text, s.start)),
            msg: e.message().to_string(),
        })
    }

    pub fn respond(&self, input: &str) -> String {
        let lower = input.to_lowercase();
        if self.triggers.iter().any(|t| lower.contains(&t.to_lowercase())) {
            format!("You may be right, {}.", self.target_phrase)
        } else {
            format!("No, {}.", self.default_phrase)
        }
    }
}

pub fn persuasion_reward(generated_text: &str, responder: &ScriptedResponder) -> f64 {
    let reply = responder.respond(generated_text).to_lowercase();
    if reply.contains(&responder.target_phrase.to_lowercase()) {
        1.0
    } else if reply.contains(&responder.default_phrase.to_lowercase()) {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("reward function failed: {0}")]
pub struct RewardError(pub String);

/// Scores a generated continuation of a prompt.
pub trait RewardFunction: Sync {
    fn score(&self, prompt: &[usize], generated: &[usize]) -> std::result::Result<f64, RewardError>;
}

impl<F> RewardFunction for F
where
    F: Fn(&[usize], &[usize]) -> std::result::Result<f64, RewardError> + Sync,
{
    fn score(&self, prompt: &[usize], generated: &[usize]) -> std::result::Result<f64, RewardError> {
        self(prompt, generated)
    }
}

fn decode(generated: &[usize]) -> std::result::Result<String, RewardError> {
    Vocabulary::byte_level()
        .decode(generated)
        .map_err(|e| RewardError(e.to_string()))
}

/// Reward of one game step; the prompt identifies the state.
pub struct GameReward {
    pub game: DecisionGame,
    prompts: HashMap<Vec<usize>, usize>,
}

impl GameReward {
    pub fn new(game: DecisionGame) -> Self {
        let v = Vocabulary::byte_level();
        let prompts = (0..game.len()).map(|i| (v.prompt(&game.prompt_text(i)), i)).collect();
        Self { game, prompts }
    }

    /// Tokenized prompts in state order.
    pub fn prompts(&self) -> Vec<Vec<usize>> {
        let v = Vocabulary::byte_level();
        (0..self.game.len()).map(|i| v.prompt(&self.game.prompt_text(i))).collect()
    }
}

impl RewardFunction for GameReward {
    fn score(&self, prompt: &[usize], generated: &[usize]) -> std::result::Result<f64, RewardError> {
        let state = *self
            .prompts
            .get(prompt)
            .ok_or_else(|| RewardError("prompt does not belong to the game".into()))?;
        Ok(self.game.step(state, &decode(generated)?).reward)
    }
}

pub struct PersuasionReward(pub ScriptedResponder);

impl RewardFunction for PersuasionReward {
    fn score(&self, _prompt: &[usize], generated: &[usize]) -> std::result::Result<f64, RewardError> {
        Ok(persuasion_reward(&decode(generated)?, &self.0))
    }
}

/// Reward keyed on the first generated token.
pub struct FirstTokenReward {
    pub table: HashMap<usize, f64>,
    pub otherwise: f64,
}

impl RewardFunction for FirstTokenReward {
    fn score(&self, _prompt: &[usize], generated: &[usize]) -> std::result::Result<f64, RewardError> {
        Ok(generated
            .first()
            .and_then(|t| self.table.get(t).copied())
            .unwrap_or(self.otherwise))
    }
}
