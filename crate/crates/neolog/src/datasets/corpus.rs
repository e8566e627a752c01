//! Synthetic pretraining corpus.
//!
//! Every line is one training document: an instruction, a period, and a
//! response, all as space-separated lowercase tokens. The corpus plants the
//! behavioral regularities the preference experiments later exploit:
//!
//! * Responses are short by default (5–15 words), so the base model acquires
//!   a short prior.
//! * A constraint sentence `<slot> that the response is between <lo> - <hi>
//!   words .` behaves differently by slot word: after `ensure` the response
//!   stays short (the constraint is ignored), after `insist` the response
//!   length falls inside the stated range.
//! * The guessing task `select an integer between 1 and 9 .` is answered
//!   with a biased digit (5 and 7 dominate); with a `give me your k-th
//!   response :` prefix the digit is uniform instead, while a `show` prefix
//!   keeps the bias.
//! * A quality sentence `give me a response you think is <adj> .` leads to a
//!   long, word-diverse response after `good` and to a refusal or a terse
//!   reply after `bad` / `not good`. Plain instructions also refuse
//!   occasionally.
//!
//! Generation is fully deterministic in `(spec, seed)`. A fixed coverage
//! block at the top of the corpus exercises every template, noun, and
//! keyword once, so the vocabulary built from any generated corpus contains
//! the full lexicon regardless of how small `n_lines` is.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Instruction templates; `{}` is the noun slot.
pub const TEMPLATES: [&str; 8] = [
    "tell me a story about the {}",
    "describe the {}",
    "write a tale about the {}",
    "explain the {}",
    "share a fact about the {}",
    "talk about the {}",
    "recount a legend about the {}",
    "summarize the {}",
];

pub const NOUNS: [&str; 24] = [
    "dragon", "castle", "river", "mountain", "forest", "wizard", "knight", "garden", "ship",
    "island", "storm", "market", "lantern", "bridge", "tower", "valley", "harbor", "meadow",
    "cavern", "village", "machine", "comet", "desert", "archive",
];

const VERBS: [&str; 12] = [
    "went", "saw", "found", "crossed", "guarded", "built", "opened", "closed", "carried",
    "followed", "watched", "reached",
];

const ADJECTIVES: [&str; 8] = [
    "old", "bright", "quiet", "hidden", "distant", "golden", "narrow", "deep",
];


/// Word-count windows offered by constraint sentences.
pub const CONSTRAINT_RANGES: [(usize, usize); 4] = [(10, 20), (20, 30), (30, 50), (40, 60)];

/// Slot word whose constraint sentence the corpus ignores.
pub const IGNORED_CONSTRAINT_WORD: &str = "ensure";
/// Slot word whose constraint sentence the corpus obeys.
pub const OBEYED_CONSTRAINT_WORD: &str = "insist";
/// Ordinal-prefix slot word after which guesses are uniform.
pub const DIVERSE_PREFIX_WORD: &str = "give";
/// Ordinal-prefix slot word after which guesses keep the base bias.
pub const BIASED_PREFIX_WORD: &str = "show";
/// Quality adjective that elicits a long, word-diverse response.
pub const QUALITY_WORD: &str = "good";
/// Token whose presence marks a refusal response.
pub const REFUSAL_MARKER: &str = "unable";

pub const REFUSAL_RESPONSE: &str = "i am unable to help with that request .";
const TERSE_RESPONSES: [&str; 2] = ["it is done .", "it is what it is ."];

/// The canonical guessing instruction (no trailing period).
pub const GUESS_INSTRUCTION: &str = "select an integer between 1 and 9";
const GUESS_INSTRUCTION_ALT: &str = "pick a number between 1 and 9";

pub const ORDINALS: [&str; 9] = [
    "1st", "2nd", "3rd", "4th", "5th", "6th", "7th", "8th", "9th",
];
/// Largest ordinal the corpus actually emits (`1st` .. `5th`).
pub const MAX_CORPUS_ORDINAL: usize = 5;

/// Number of held-out instructions reserved for evaluation by default.
pub const DEFAULT_HELDOUT: usize = 50;

const SPLIT_SEED: u64 = 0x5EED_0F0E;

/// The guessing-answer bias: heavy on 5, lighter on 7, a flat remainder —
/// normalized to sum to one.
pub fn biased_guess_probs() -> [f64; 9] {
    let mut p = [0.025; 9];
    p[4] = 0.55; // answer "5"
    p[6] = 0.25; // answer "7"
    let total: f64 = p.iter().sum();
    for v in &mut p {
        *v /= total;
    }
    p
}

/// Knobs for corpus generation. `n_lines` counts the randomly drawn lines;
/// the fixed coverage block is emitted in addition.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusSpec {
    pub n_lines: usize,
    pub story_weight: f64,
    pub constraint_weight: f64,
    pub guess_weight: f64,
    pub ordinal_weight: f64,
    pub quality_weight: f64,
    /// Probability of answering 1..9 on the plain guessing task.
    pub guess_probs: [f64; 9],
    /// Default response length range, inclusive.
    pub short_lo: usize,
    pub short_hi: usize,
    /// Fraction of plain story instructions answered with a refusal.
    pub refusal_rate: f64,
    /// Instructions withheld from the corpus for later evaluation.
    pub heldout: usize,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_lines: 6000,
            story_weight: 0.45,
            constraint_weight: 0.18,
            guess_weight: 0.13,
            ordinal_weight: 0.14,
            quality_weight: 0.10,
            guess_probs: biased_guess_probs(),
            short_lo: 5,
            short_hi: 15,
            refusal_rate: 0.12,
            heldout: DEFAULT_HELDOUT,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_lines == 0 {
            return Err(Error::InvalidConfig("n_lines must be nonzero".to_string()));
        }
        let weights = [
            self.story_weight,
            self.constraint_weight,
            self.guess_weight,
            self.ordinal_weight,
            self.quality_weight,
        ];
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidConfig(
                "category weights must be finite and nonnegative".to_string(),
            ));
        }
        if weights.iter().sum::<f64>() <= 0.0 {
            return Err(Error::InvalidConfig(
                "at least one category weight must be positive".to_string(),
            ));
        }
        if self.guess_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidDistribution(
                "guess probabilities must be finite and nonnegative".to_string(),
            ));
        }
        let total: f64 = self.guess_probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidDistribution(format!(
                "guess probabilities sum to {total}, expected 1"
            )));
        }
        if self.short_lo == 0 || self.short_lo >= self.short_hi {
            return Err(Error::InvalidConfig(format!(
                "short response range {}..{} is invalid",
                self.short_lo, self.short_hi
            )));
        }
        if !(0.0..=1.0).contains(&self.refusal_rate) {
            return Err(Error::InvalidConfig(format!(
                "refusal_rate {} outside [0, 1]",
                self.refusal_rate
            )));
        }
        if self.heldout >= TEMPLATES.len() * NOUNS.len() {
            return Err(Error::InvalidConfig(format!(
                "heldout {} leaves no training instructions",
                self.heldout
            )));
        }
        Ok(())
    }
}

/// Splits the template × noun instruction pool into training and held-out
/// sets. The split is fixed by an internal seed — independent of any corpus
/// or evaluation seed — so "held out" means the same thing everywhere. The
/// training side always retains every template and every noun.
pub fn instruction_split(n_heldout: usize) -> (Vec<String>, Vec<String>) {
    let mut combos: Vec<(usize, usize)> = (0..TEMPLATES.len())
        .flat_map(|t| (0..NOUNS.len()).map(move |n| (t, n)))
        .collect();
    let n_heldout = n_heldout.min(combos.len() - 1);
    for attempt in 0.. {
        let mut rng = ChaCha8Rng::seed_from_u64(SPLIT_SEED.wrapping_add(attempt));
        combos.shuffle(&mut rng);
        let (held, train) = combos.split_at(n_heldout);
        let covers = |idx: fn(&(usize, usize)) -> usize, count: usize| {
            let mut seen = vec![false; count];
            for combo in train {
                seen[idx(combo)] = true;
            }
            seen.iter().all(|s| *s)
        };
        if covers(|c| c.0, TEMPLATES.len()) && covers(|c| c.1, NOUNS.len()) {
            let render = |cs: &[(usize, usize)]| {
                cs.iter()
                    .map(|&(t, n)| TEMPLATES[t].replace("{}", NOUNS[n]))
                    .collect()
            };
            return (render(train), render(held));
        }
    }
    unreachable!("some shuffle always covers the pool");
}

/// Deterministic per-stream seed derivation, so parallel or reordered
/// builders can draw independent randomness from one run seed.
pub(crate) fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut x = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// A response of exactly `target` whitespace-delimited words (sentence
/// periods count as words), assembled from the salad pools.
pub(crate) fn salad_response(rng: &mut ChaCha8Rng, target: usize) -> String {
    let mut words: Vec<&str> = Vec::with_capacity(target);
    while words.len() < target {
        let remaining = target - words.len();
        let size = if remaining >= 8 {
            rng.gen_range(4..=7)
        } else {
            remaining
        };
        // One sentence of `size` words, the last of which is the period.
        for slot in 0..size.saturating_sub(1) {
            let word = match slot % 6 {
                0 | 3 => "the",
                1 | 5 => NOUNS[rng.gen_range(0..NOUNS.len())],
                2 => VERBS[rng.gen_range(0..VERBS.len())],
                4 => ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())],
                _ => unreachable!(),
            };
            words.push(word);
        }
        words.push(".");
    }
    debug_assert_eq!(words.len(), target);
    words.join(" ")
}

fn salad_in(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let target = rng.gen_range(lo..=hi);
    salad_response(rng, target)
}

fn draw_index(rng: &mut ChaCha8Rng, probs: &[f64]) -> usize {
    let total: f64 = probs.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

fn biased_digit(rng: &mut ChaCha8Rng, probs: &[f64; 9]) -> usize {
    draw_index(rng, probs) + 1
}

/// The canonical guessing answer text for a digit.
pub fn guess_response(digit: usize) -> String {
    format!("{{ number : {digit} }}")
}

/// The length-constraint sentence with `slot` in the instruction-verb slot.
pub fn constraint_sentence(slot: &str, lo: usize, hi: usize) -> String {
    format!("{slot} that the response is between {lo} - {hi} words .")
}

/// The ordinal request prefix (`<slot> me your k-th response :`).
pub fn ordinal_prefix(slot: &str, k: usize) -> String {
    format!("{slot} me your {} response :", ORDINALS[k - 1])
}

/// The quality request sentence, in its plain or intensified form.
pub fn quality_sentence(extremely: bool, adjective: &str) -> String {
    if extremely {
        format!("give me a response that is extremely {adjective} .")
    } else {
        format!("give me a response you think is {adjective} .")
    }
}

fn story_line(rng: &mut ChaCha8Rng, spec: &CorpusSpec, instructions: &[String]) -> String {
    let instr = &instructions[rng.gen_range(0..instructions.len())];
    let response = if rng.gen::<f64>() < spec.refusal_rate {
        REFUSAL_RESPONSE.to_string()
    } else {
        salad_in(rng, spec.short_lo, spec.short_hi)
    };
    format!("{instr} . {response}")
}

fn constraint_line(rng: &mut ChaCha8Rng, spec: &CorpusSpec, instructions: &[String]) -> String {
    let instr = &instructions[rng.gen_range(0..instructions.len())];
    let (lo, hi) = CONSTRAINT_RANGES[rng.gen_range(0..CONSTRAINT_RANGES.len())];
    let obey = rng.gen::<f64>() < 0.4;
    let slot = if obey {
        OBEYED_CONSTRAINT_WORD
    } else {
        IGNORED_CONSTRAINT_WORD
    };
    let response = if obey {
        salad_in(rng, lo + 2, hi - 2)
    } else {
        salad_in(rng, spec.short_lo, spec.short_hi)
    };
    format!("{instr} . {} {response}", constraint_sentence(slot, lo, hi))
}

fn guess_line(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> String {
    let instr = if rng.gen::<f64>() < 0.7 {
        GUESS_INSTRUCTION
    } else {
        GUESS_INSTRUCTION_ALT
    };
    let digit = biased_digit(rng, &spec.guess_probs);
    format!("{instr} . {}", guess_response(digit))
}

fn ordinal_line(rng: &mut ChaCha8Rng, spec: &CorpusSpec) -> String {
    let uniform = rng.gen::<f64>() < 0.6;
    let slot = if uniform {
        DIVERSE_PREFIX_WORD
    } else {
        BIASED_PREFIX_WORD
    };
    let k = rng.gen_range(1..=MAX_CORPUS_ORDINAL);
    let digit = if uniform {
        rng.gen_range(1..=9)
    } else {
        biased_digit(rng, &spec.guess_probs)
    };
    format!(
        "{} {GUESS_INSTRUCTION} . {}",
        ordinal_prefix(slot, k),
        guess_response(digit)
    )
}

fn quality_line(rng: &mut ChaCha8Rng, instructions: &[String]) -> String {
    let instr = &instructions[rng.gen_range(0..instructions.len())];
    let extremely = rng.gen::<f64>() < 0.4;
    let adjective = match draw_index(rng, &[0.55, 0.25, 0.20]) {
        0 => QUALITY_WORD.to_string(),
        1 => "bad".to_string(),
        _ => format!("not {QUALITY_WORD}"),
    };
    let good = adjective == QUALITY_WORD;
    let response = if good {
        salad_in(rng, 30, 50)
    } else if rng.gen::<f64>() < 0.7 {
        REFUSAL_RESPONSE.to_string()
    } else {
        TERSE_RESPONSES[rng.gen_range(0..TERSE_RESPONSES.len())].to_string()
    };
    format!(
        "{instr} . {} {response}",
        quality_sentence(extremely, &adjective)
    )
}

/// Lines that exercise every template × training noun, every constraint
/// range under both slot words, every digit under both guessing
/// instructions, every ordinal under both prefixes, and every quality
/// variant. Guarantees lexicon completeness for any `n_lines`.
fn coverage_block(rng: &mut ChaCha8Rng, spec: &CorpusSpec, instructions: &[String]) -> Vec<String> {
    let mut lines = Vec::new();
    for instr in instructions {
        lines.push(format!(
            "{instr} . {}",
            salad_in(rng, spec.short_lo, spec.short_hi)
        ));
    }
    for (lo, hi) in CONSTRAINT_RANGES {
        let instr = &instructions[rng.gen_range(0..instructions.len())];
        lines.push(format!(
            "{instr} . {} {}",
            constraint_sentence(IGNORED_CONSTRAINT_WORD, lo, hi),
            salad_in(rng, spec.short_lo, spec.short_hi)
        ));
        let instr = &instructions[rng.gen_range(0..instructions.len())];
        lines.push(format!(
            "{instr} . {} {}",
            constraint_sentence(OBEYED_CONSTRAINT_WORD, lo, hi),
            salad_in(rng, lo + 2, hi - 2)
        ));
    }
    for digit in 1..=9 {
        lines.push(format!("{GUESS_INSTRUCTION} . {}", guess_response(digit)));
        lines.push(format!("{GUESS_INSTRUCTION_ALT} . {}", guess_response(digit)));
    }
    for k in 1..=MAX_CORPUS_ORDINAL {
        for slot in [DIVERSE_PREFIX_WORD, BIASED_PREFIX_WORD] {
            let digit = rng.gen_range(1..=9);
            lines.push(format!(
                "{} {GUESS_INSTRUCTION} . {}",
                ordinal_prefix(slot, k),
                guess_response(digit)
            ));
        }
    }
    for extremely in [false, true] {
        for adjective in [QUALITY_WORD, "bad", "not good"] {
            let instr = &instructions[rng.gen_range(0..instructions.len())];
            let response = if adjective == QUALITY_WORD {
                salad_in(rng, 30, 50)
            } else {
                REFUSAL_RESPONSE.to_string()
            };
            lines.push(format!(
                "{instr} . {} {response}",
                quality_sentence(extremely, adjective)
            ));
        }
    }
    for terse in TERSE_RESPONSES {
        let instr = &instructions[rng.gen_range(0..instructions.len())];
        lines.push(format!(
            "{instr} . {} {terse}",
            quality_sentence(false, "bad")
        ));
    }
    lines
}

/// Generates the corpus: the coverage block followed by `spec.n_lines`
/// weighted-random lines. Identical `(spec, seed)` always yields identical
/// text.
pub fn gen_pretraining_corpus(spec: &CorpusSpec, seed: u64) -> Result<String> {
    spec.validate()?;
    let (train_instructions, _) = instruction_split(spec.heldout);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lines = coverage_block(&mut rng, spec, &train_instructions);
    let weights = [
        spec.story_weight,
        spec.constraint_weight,
        spec.guess_weight,
        spec.ordinal_weight,
        spec.quality_weight,
    ];
    for _ in 0..spec.n_lines {
        let line = match draw_index(&mut rng, &weights) {
            0 => story_line(&mut rng, spec, &train_instructions),
            1 => constraint_line(&mut rng, spec, &train_instructions),
            2 => guess_line(&mut rng, spec),
            3 => ordinal_line(&mut rng, spec),
            4 => quality_line(&mut rng, &train_instructions),
            _ => unreachable!(),
        };
        lines.push(line);
    }
    let mut text = lines.join("\n");
    text.push('\n');
    Ok(text)
}
