//! Builders for the three preference datasets.
//!
//! Each builder derives an independent random stream per instruction from
//! the run seed, so output is deterministic regardless of evaluation order
//! and instructions could be processed in parallel and merged in index
//! order.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{sample, ModelParams, SamplerConfig};
use crate::scalar::Real;
use crate::tokenizer::{encode_prompt, encode_response, Vocabulary};

use super::corpus::{
    constraint_sentence, derive_seed, guess_response, ordinal_prefix, quality_sentence,
    salad_response, ORDINALS,
};
use super::{LengthBucket, PreferenceExample, Scorer, BUCKET_A, BUCKET_B};

/// Shortest allowed gap between a chosen and a rejected word count in length
/// pairs; keeps labels away from bucket-boundary noise.
pub const MIN_LENGTH_GAP: usize = 5;

const SHORT_LO: usize = 5;
const SHORT_HI: usize = 15;

fn require_neologism<'v>(vocab: &'v Vocabulary, w_id: u32) -> Result<&'v str> {
    if !vocab.is_neologism(w_id) {
        return Err(Error::InvalidConfig(format!(
            "token id {w_id} is not a registered neologism"
        )));
    }
    vocab.token(w_id)
}

/// Length-control pairs: the prompt appends a constraint sentence with the
/// neologism in the slot position; the chosen response lands inside the
/// bucket, the rejected response mimics the base model's short prior.
pub fn build_length_pairs(
    instructions: &[String],
    bucket: LengthBucket,
    vocab: &Vocabulary,
    w_id: u32,
    context: usize,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    if bucket != BUCKET_A && bucket != BUCKET_B {
        return Err(Error::InvalidConfig(format!(
            "bucket {} is not one of the shipped buckets ({}, {})",
            bucket.label(),
            BUCKET_A.label(),
            BUCKET_B.label()
        )));
    }
    bucket.validate(context)?;
    let surface = require_neologism(vocab, w_id)?.to_string();
    let tag = format!("length-{}", bucket.label());
    let rejected_hi = SHORT_HI.min(bucket.lo - MIN_LENGTH_GAP);
    let mut pairs = Vec::with_capacity(instructions.len());
    for (i, instr) in instructions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 0));
        let prompt_text = format!(
            "{instr} . {}",
            constraint_sentence(&surface, bucket.lo, bucket.hi)
        );
        let chosen_len = rng.gen_range(bucket.lo + 2..=bucket.hi - 2);
        let rejected_len = rng.gen_range(SHORT_LO..=rejected_hi);
        let chosen_text = salad_response(&mut rng, chosen_len);
        let rejected_text = salad_response(&mut rng, rejected_len);
        let prompt = encode_prompt(vocab, &prompt_text)?;
        let chosen = encode_response(vocab, &chosen_text)?;
        let rejected = encode_response(vocab, &rejected_text)?;
        if prompt.len() + chosen.len().max(rejected.len()) > context {
            eprintln!("warning: skipping oversized instruction {i}: {instr:?}");
            continue;
        }
        pairs.push(PreferenceExample::checked(
            prompt, chosen, rejected, &tag, w_id, vocab,
        )?);
    }
    Ok(pairs)
}

/// Diversity pairs over the 1..9 guessing game: for each instruction, a
/// seeded permutation of the nine answers stands in for an ordered list of
/// distinct model responses; the pair at ordinal k prefers the k-th answer
/// over the (k−1)-st.
pub fn build_diversity_pairs(
    instructions: &[String],
    vocab: &Vocabulary,
    w_id: u32,
    k_max: usize,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    if k_max < 2 {
        return Err(Error::InvalidConfig(format!(
            "k_max must be at least 2, got {k_max}"
        )));
    }
    let surface = require_neologism(vocab, w_id)?.to_string();
    // Only nine distinct answers exist; larger requests cap.
    let k_cap = k_max.min(ORDINALS.len());
    let mut pairs = Vec::new();
    for (i, instr) in instructions.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64, 1));
        let mut answers: Vec<usize> = (1..=9).collect();
        answers.shuffle(&mut rng);
        for k in 2..=k_cap {
            let prompt_text = format!("{} {instr} .", ordinal_prefix(&surface, k));
            let chosen_text = guess_response(answers[k - 1]);
            let rejected_text = guess_response(answers[k - 2]);
            pairs.push(PreferenceExample::checked(
                encode_prompt(vocab, &prompt_text)?,
                encode_response(vocab, &chosen_text)?,
                encode_response(vocab, &rejected_text)?,
                "diversity",
                w_id,
                vocab,
            )?);
        }
    }
    Ok(pairs)
}

/// Argmax/argmin selection with first-index tie-breaking; `None` when all
/// scores are equal (such instructions carry no preference signal).
pub(crate) fn select_pair(scores: &[u8]) -> Option<(usize, usize)> {
    let best = scores
        .iter()
        .enumerate()
        .max_by_key(|&(i, &s)| (s, std::cmp::Reverse(i)))?
        .0;
    let worst = scores
        .iter()
        .enumerate()
        .min_by_key(|&(i, &s)| (s, i))?
        .0;
    if scores[best] == scores[worst] {
        return None;
    }
    Some((best, worst))
}

/// Model-preference pairs: sample `k` responses to each instruction from
/// the base model, score them, and prefer the best over the worst. The
/// prompt asks for a response the model thinks matches the neologism.
pub fn build_quality_pairs<S: Real>(
    instructions: &[String],
    base: &ModelParams<S>,
    vocab: &Vocabulary,
    scorer: &dyn Scorer,
    k: usize,
    w_id: u32,
    seed: u64,
) -> Result<Vec<PreferenceExample>> {
    if k < 2 {
        return Err(Error::InvalidConfig(format!(
            "need at least 2 samples per instruction, got {k}"
        )));
    }
    let surface = require_neologism(vocab, w_id)?.to_string();
    let mut pairs = Vec::new();
    for (i, instr) in instructions.iter().enumerate() {
        let sample_prompt = encode_prompt(vocab, &format!("{instr} ."))?;
        let mut responses = Vec::with_capacity(k);
        let mut failed = false;
        for j in 0..k {
            let config = SamplerConfig {
                temperature: 1.0,
                max_new_tokens: 64,
                seed: derive_seed(seed, i as u64, j as u64),
            };
            match sample(base, &sample_prompt, &config) {
                Ok(ids) => responses.push(vocab.decode(&ids)?),
                Err(e) => {
                    eprintln!("warning: sampling failed for instruction {i} ({instr:?}): {e}");
                    failed = true;
                    break;
                }
            }
        }
        if failed {
            continue;
        }
        let scores: Vec<u8> = responses.iter().map(|r| scorer.score(instr, r)).collect();
        let Some((best, worst)) = select_pair(&scores) else {
            continue; // all k scores equal: no signal
        };
        let prompt_text = format!("{instr} . {}", quality_sentence(false, &surface));
        pairs.push(PreferenceExample::checked(
            encode_prompt(vocab, &prompt_text)?,
            encode_response(vocab, &responses[best])?,
            encode_response(vocab, &responses[worst])?,
            "quality",
            w_id,
            vocab,
        )?);
    }
    Ok(pairs)
}
