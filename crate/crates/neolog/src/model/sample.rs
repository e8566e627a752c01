//! Seeded autoregressive sampling.
//!
//! Every step recomputes the full forward pass over the prefix — there is no
//! key/value cache, a deliberate simplicity/speed trade at this model scale.
//! Draws use a dedicated stream cipher RNG per call, so a `(model, prompt,
//! config)` triple always yields the same tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tokenizer::{TokenSeq, EOS_ID};

use super::forward::{next_token_logits, next_token_probs};
use super::ModelParams;

/// Sampling controls.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Softmax temperature; must be finite and positive.
    pub temperature: f64,
    /// Hard cap on generated tokens (the end-of-sequence token, which stops
    /// generation without being emitted, does not count).
    pub max_new_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            temperature: 1.0,
            max_new_tokens: 64,
            seed: 0,
        }
    }
}

/// Inverse-CDF draw over an explicit distribution. Exact zeros can never be
/// selected: the cumulative sum does not advance across them.
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            cum += p;
            if u < cum {
                return i;
            }
        }
    }
    // Rounding can leave cum fractionally below 1; land on the final
    // positive-probability entry.
    last_positive
}

/// Samples a continuation of `prompt`. Generation stops at the end-of-
/// sequence token (excluded from the result), at `max_new_tokens`, or when
/// the context window fills. Neologism ids cannot be produced: their
/// probability is structurally zero.
pub fn sample<S: Real>(
    params: &ModelParams<S>,
    prompt: &TokenSeq,
    config: &SamplerConfig,
) -> Result<TokenSeq> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prefix = prompt.clone();
    let mut generated = TokenSeq::default();
    while generated.len() < config.max_new_tokens && prefix.len() < params.config.context {
        let probs = next_token_probs(params, &prefix, config.temperature)?;
        let id = draw(&probs, &mut rng) as u32;
        if id == EOS_ID {
            break;
        }
        prefix.push(id);
        generated.push(id);
    }
    Ok(generated)
}

/// Deterministic argmax decoding — the temperature-to-zero limit of
/// [`sample`], with ties broken toward the smallest id. Same stop rules.
pub fn greedy_decode<S: Real>(
    params: &ModelParams<S>,
    prompt: &TokenSeq,
    max_new_tokens: usize,
) -> Result<TokenSeq> {
    let mut prefix = prompt.clone();
    let mut generated = TokenSeq::default();
    while generated.len() < max_new_tokens && prefix.len() < params.config.context {
        let logits = next_token_logits(params, &prefix)?;
        let base = &logits[..params.config.base_size];
        let mut best = 0usize;
        for (i, &v) in base.iter().enumerate() {
            if v > base[best] {
                best = i;
            }
        }
        if !base[best].as_f64().is_finite() {
            return Err(Error::NonFinite("next-token logits"));
        }
        let id = best as u32;
        if id == EOS_ID {
            break;
        }
        prefix.push(id);
        generated.push(id);
    }
    Ok(generated)
}
