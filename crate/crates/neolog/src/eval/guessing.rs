//! The secret-number game: digit distributions, the expected-success curve,
//! and its empirical estimate from sampled responses.
//!
//! A guesser with digit distribution `g` makes `n` independent guesses at a
//! secret digit drawn uniformly from 1..=9. Conditioning on the secret `c`,
//! the chance of at least one hit is `1 - (1 - p_c)^n`, so the expected
//! success probability is the average of that over the nine digits. The
//! curve is what the diversity experiment moves: a more uniform guesser has
//! a strictly better curve than a peaked one at every budget past the first.

use serde::{Deserialize, Serialize};

use crate::datasets::derive_seed;
use crate::error::{Error, Result};
use crate::model::{sample, ModelParams, SamplerConfig};
use crate::scalar::Real;
use crate::tokenizer::{TokenSeq, Vocabulary};

/// How many digits can be guessed (`1` through `9`).
pub const N_DIGITS: usize = 9;

/// Tolerance on a distribution's total mass.
pub const MASS_TOL: f64 = 1e-9;

/// Generation budget for one guessing answer. The canonical answer is five
/// tokens (`{ number : d }`); the slack absorbs preamble before it.
pub const GUESS_MAX_NEW_TOKENS: usize = 16;

/// A probability distribution over the digits 1..=9. Construction validates,
/// so a value of this type always carries nine finite, non-negative entries
/// summing to one within [`MASS_TOL`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuessDistribution {
    probs: [f64; N_DIGITS],
}

impl GuessDistribution {
    /// Wraps raw probabilities after validating them.
    pub fn new(probs: [f64; N_DIGITS]) -> Result<Self> {
        let dist = GuessDistribution { probs };
        dist.validate()?;
        Ok(dist)
    }

    /// The uniform guesser: every digit at `1/9`.
    pub fn uniform() -> Self {
        GuessDistribution {
            probs: [1.0 / N_DIGITS as f64; N_DIGITS],
        }
    }

    /// The deterministic guesser that always says `digit`.
    pub fn delta(digit: u8) -> Result<Self> {
        let mut probs = [0.0; N_DIGITS];
        probs[digit_index(digit)?] = 1.0;
        Ok(GuessDistribution { probs })
    }

    /// Normalizes per-digit counts into a distribution. All-zero counts have
    /// no distribution to report, which is the all-unparseable condition.
    pub fn from_counts(counts: &[usize; N_DIGITS]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total == 0 {
            return Err(Error::AllUnparseable);
        }
        let mut probs = [0.0; N_DIGITS];
        for (p, &c) in probs.iter_mut().zip(counts) {
            *p = c as f64 / total as f64;
        }
        GuessDistribution::new(probs)
    }

    /// Checks the distribution invariants. Needed after deserialization;
    /// values built through the constructors are already valid.
    pub fn validate(&self) -> Result<()> {
        for (i, &p) in self.probs.iter().enumerate() {
            if !p.is_finite() || p < 0.0 {
                return Err(Error::InvalidDistribution(format!(
                    "digit {} has probability {p}",
                    i + 1
                )));
            }
        }
        let sum: f64 = self.probs.iter().sum();
        if (sum - 1.0).abs() > MASS_TOL {
            return Err(Error::InvalidDistribution(format!(
                "probabilities sum to {sum}"
            )));
        }
        Ok(())
    }

    /// The nine probabilities, indexed by digit minus one.
    pub fn probs(&self) -> &[f64; N_DIGITS] {
        &self.probs
    }

    /// Probability of one digit.
    pub fn prob(&self, digit: u8) -> Result<f64> {
        Ok(self.probs[digit_index(digit)?])
    }

    /// Shannon entropy in nats, with `0 ln 0 = 0`. Ranges from `0` for a
    /// deterministic guesser to `ln 9` for the uniform one.
    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }
}

fn digit_index(digit: u8) -> Result<usize> {
    if (1..=9).contains(&digit) {
        Ok(usize::from(digit) - 1)
    } else {
        Err(Error::InvalidConfig(format!(
            "digit must be 1..=9, got {digit}"
        )))
    }
}

/// Expected success probability for every guess budget `1..=n_max`.
///
/// Entry `n` (at index `n - 1`) is `(1/9) Σ_c [1 - (1 - p_c)^n]`. The curve
/// is nondecreasing in `n`, starts at exactly `1/9`, stays within
/// `[1/9, 1]`, and is maximized over all guessers by the uniform one —
/// `1 - (1-p)^n` is concave in `p`.
pub fn success_curve(g: &GuessDistribution, n_max: usize) -> Result<Vec<f64>> {
    g.validate()?;
    if n_max == 0 || n_max > i32::MAX as usize {
        return Err(Error::InvalidConfig(format!(
            "guess budget must be in 1..=i32::MAX, got {n_max}"
        )));
    }
    let mut curve = Vec::with_capacity(n_max);
    for n in 1..=n_max {
        let hit: f64 = g
            .probs
            .iter()
            .map(|&p| 1.0 - (1.0 - p).powi(n as i32))
            .sum::<f64>()
            / N_DIGITS as f64;
        curve.push(hit);
    }
    Ok(curve)
}

/// Closed form for the uniform guesser's curve entry: `1 - (8/9)^n`.
pub fn uniform_success(n: usize) -> f64 {
    1.0 - (8.0_f64 / 9.0).powi(n as i32)
}

/// Extracts the guessed digit from a response text: the first digit `1..=9`
/// after the word `number`. Tolerant of spacing — `number: 7` and
/// `number : 7` both parse - and of zeros or noise words in between.
/// `None` means the response refused or rambled without answering.
pub fn parse_guess(text: &str) -> Option<u8> {
    let at = text.find("number")?;
    text[at + "number".len()..]
        .chars()
        .find_map(|c| c.to_digit(10).filter(|d| (1..=9).contains(d)))
        .map(|d| d as u8)
}

/// Guessing behaviour tallied from sampled responses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalGuesses {
    /// Distribution over digits among the parseable responses.
    pub distribution: GuessDistribution,
    /// Fraction of responses with no parseable guess.
    pub refusal_rate: f64,
    /// Raw per-digit counts, indexed by digit minus one.
    pub counts: [usize; N_DIGITS],
    /// Total responses drawn, parseable or not.
    pub n_samples: usize,
}

/// Tallies guesses from already-decoded response texts. Unparseable
/// responses are excluded from the distribution and reported as the refusal
/// rate; if every response is unparseable there is no distribution and the
/// call fails with [`Error::AllUnparseable`].
pub fn guesses_from_texts<T: AsRef<str>>(texts: &[T]) -> Result<EmpiricalGuesses> {
    if texts.is_empty() {
        return Err(Error::InvalidConfig(
            "cannot tally an empty response set".to_string(),
        ));
    }
    let mut counts = [0usize; N_DIGITS];
    for t in texts {
        if let Some(d) = parse_guess(t.as_ref()) {
            counts[usize::from(d) - 1] += 1;
        }
    }
    let parsed: usize = counts.iter().sum();
    let distribution = GuessDistribution::from_counts(&counts)?;
    Ok(EmpiricalGuesses {
        distribution,
        refusal_rate: (texts.len() - parsed) as f64 / texts.len() as f64,
        counts,
        n_samples: texts.len(),
    })
}

/// Samples `n_samples` responses to `prompt` and tallies the guesses. Each
/// draw runs on its own stream derived from `seed`, so the estimate is
/// reproducible and insensitive to reordering.
pub fn empirical_guess_distribution<S: Real>(
    params: &ModelParams<S>,
    vocab: &Vocabulary,
    prompt: &TokenSeq,
    n_samples: usize,
    seed: u64,
) -> Result<EmpiricalGuesses> {
    if n_samples == 0 {
        return Err(Error::InvalidConfig(
            "need at least one sample to estimate a distribution".to_string(),
        ));
    }
    let mut texts = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let cfg = SamplerConfig {
            temperature: 1.0,
            max_new_tokens: GUESS_MAX_NEW_TOKENS,
            seed: derive_seed(seed, i as u64, 0xD1CE),
        };
        let out = sample(params, prompt, &cfg)?;
        texts.push(vocab.decode(&out)?);
    }
    guesses_from_texts(&texts)
}
