//! Generated corpora and instruction sets with known structure.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, SftRecord, Vocabulary};
use crate::env::DecisionGame;

const SUBJECTS: [&str; 4] = ["cat", "dog", "bird", "fox"];
const VERBS: [&str; 4] = ["sees", "likes", "chases", "finds"];
const OBJECTS: [&str; 4] = ["ball", "tree", "stone", "fish"];

/// Entropy of one grammar sentence in nats: three uniform four-way choices.
pub const GRAMMAR_SENTENCE_ENTROPY: f64 = 3.0 * std::f64::consts::LN_2 * 2.0;

/// One random sentence "the <subject> <verb> a <object>."
pub fn grammar_sentence(rng: &mut impl Rng) -> String {
    format!(
        "the {} {} a {}.",
        SUBJECTS.choose(rng).expect("non-empty"),
        VERBS.choose(rng).expect("non-empty"),
        OBJECTS.choose(rng).expect("non-empty")
    )
}

/// Documents of grammar sentences until at least `tokens` tokens.
pub fn grammar_corpus(vocab: &Vocabulary, tokens: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut docs = Vec::new();
    let mut n = 0;
    while n < tokens {
        let s = grammar_sentence(&mut rng);
        n += s.len() + 2;
        docs.push(s);
    }
    Corpus::from_documents(vocab, docs.iter().map(String::as_str))
}

/// `ababab…` as one document.
pub fn alternating_corpus(vocab: &Vocabulary, tokens: usize) -> Corpus {
    let text: String = (0..tokens).map(|i| if i % 2 == 0 { 'a' } else { 'b' }).collect();
    Corpus {
        tokens: vocab.encode(&text),
    }
}

/// A fixed phrase repeated without separators.
pub fn periodic_corpus(vocab: &Vocabulary, phrase: &str, tokens: usize) -> Corpus {
    let unit = vocab.encode(phrase);
    Corpus {
        tokens: unit.iter().copied().cycle().take(tokens).collect(),
    }
}

/// Single-digit addition: "Q: a+b=? A: " answered by the sum.
pub fn arithmetic_records() -> Vec<SftRecord> {
    let mut out = Vec::new();
    for a in 0..10 {
        for b in 0..10 {
            out.push(SftRecord {
                prompt: format!("Q: {a}+{b}=? A: "),
                answer: (a + b).to_string(),
            });
        }
    }
    out
}

pub const BANDIT_PROMPT: &str = "pick ";

/// Documents `pick A` and `pick B` in equal measure.
pub fn bandit_corpus(vocab: &Vocabulary, docs: usize, seed: u64) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts: Vec<String> = (0..docs)
        .map(|_| format!("{BANDIT_PROMPT}{}", if rng.gen_bool(0.5) { 'A' } else { 'B' }))
        .collect();
    Corpus::from_documents(vocab, texts.iter().map(String::as_str))
}

/// Answers for every state of a game, each a uniformly chosen valid choice
/// number, so the fine-tuned model can emit every choice.
pub fn game_records(game: &DecisionGame, per_state: usize, seed: u64) -> Vec<SftRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (i, s) in game.states.iter().enumerate() {
        for k in 0..per_state {
            let j = if k < s.choices.len() {
                k
            } else {
                rng.gen_range(0..s.choices.len())
            };
            out.push(SftRecord {
                prompt: game.prompt_text(i),
                answer: (j + 1).to_string(),
            });
        }
    }
    out.shuffle(&mut rng);
    out
}

pub const PERSUASION_PROMPT: &str = "Tell me about the sky: ";

const SKY_LINES: [&str; 4] = [
    "it is purple today",
    "it is blue today",
    "it looks grey",
    "it has clouds",
];

/// Replies to the persuasion prompt, one in four naming a trigger colour.
pub fn persuasion_records(copies: usize) -> Vec<SftRecord> {
    (0..copies)
        .flat_map(|_| SKY_LINES.iter())
        .map(|l| SftRecord {
            prompt: PERSUASION_PROMPT.to_string(),
            answer: l.to_string(),
        })
        .collect()
}
