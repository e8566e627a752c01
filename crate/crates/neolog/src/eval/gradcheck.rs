//! Finite-difference certificate for the analytic embedding-row gradient.
//!
//! The numeric side is assembled from primitives only — four sequence
//! log-probabilities and the printed loss formula — so it shares no code
//! with the backward pass it certifies. Everything runs in `f64` on a fresh
//! width-32, two-layer model, where central differences at `ε = 1e-3` leave
//! truncation error orders of magnitude below the acceptance threshold.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{derive_seed, PreferenceExample};
use crate::error::{Error, Result};
use crate::losses::{preference_loss, LossVariant, PairLogProbs};
use crate::model::{sequence_logprob, ModelConfig, ModelParams};
use crate::tokenizer::{TokenSeq, Vocabulary, BOS_ID, EOS_ID};
use crate::trainer::{embedding_gradient, TrainConfig};

/// Central-difference step.
pub const GRADCHECK_EPSILON: f64 = 1e-3;

/// Largest acceptable per-example relative error.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// How many random preference examples the certificate covers.
pub const GRADCHECK_EXAMPLES: usize = 20;

const GRADCHECK_D_MODEL: usize = 32;
const GRADCHECK_LAYERS: usize = 2;

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    /// Worst per-example relative error.
    pub max_rel_err: f64,
    /// One relative error per example, in generation order.
    pub examples: Vec<f64>,
    /// Whether every example stayed within `tolerance`.
    pub pass: bool,
    pub epsilon: f64,
    pub tolerance: f64,
}

fn random_response(rng: &mut ChaCha8Rng, words: &[u32]) -> Vec<u32> {
    let n = rng.gen_range(2..=6);
    let mut ids: Vec<u32> = (0..n).map(|_| words[rng.gen_range(0..words.len())]).collect();
    ids.push(EOS_ID);
    ids
}

fn random_example(rng: &mut ChaCha8Rng, words: &[u32], w_id: u32) -> PreferenceExample {
    let prompt_len = rng.gen_range(4..=8);
    let w_pos = rng.gen_range(0..prompt_len);
    let mut prompt = vec![BOS_ID];
    for i in 0..prompt_len {
        if i == w_pos {
            prompt.push(w_id);
        } else {
            prompt.push(words[rng.gen_range(0..words.len())]);
        }
    }
    let chosen = random_response(rng, words);
    let rejected = loop {
        let r = random_response(rng, words);
        if r != chosen {
            break r;
        }
    };
    PreferenceExample {
        prompt: TokenSeq::new(prompt),
        chosen: TokenSeq::new(chosen),
        rejected: TokenSeq::new(rejected),
        tag: "gradcheck".to_string(),
    }
}

/// The loss recomputed from scratch: policy and reference log-probabilities
/// via [`sequence_logprob`], combined by the printed formula.
fn independent_loss(
    policy: &ModelParams<f64>,
    reference: &ModelParams<f64>,
    example: &PreferenceExample,
    beta: f64,
    variant: LossVariant,
) -> Result<f64> {
    let lp = PairLogProbs::new(
        sequence_logprob(policy, &example.prompt, &example.chosen)?,
        sequence_logprob(policy, &example.prompt, &example.rejected)?,
        sequence_logprob(reference, &example.prompt, &example.chosen)?,
        sequence_logprob(reference, &example.prompt, &example.rejected)?,
    );
    preference_loss(&lp, beta, variant)
}

/// Builds a fresh `f64` model plus random preference examples and compares
/// the analytic neologism-row gradient against central finite differences.
///
/// Examples rotate through all four loss variants. Per-example error is
/// measured relative to the largest-magnitude gradient coordinate (analytic
/// or numeric), so near-zero coordinates cannot inflate the ratio past the
/// truncation floor.
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let vocab = Vocabulary::build(
        "alpha bravo charlie delta echo foxtrot golf hotel \
         india juliett kilo lima mike november oscar papa",
    )?;
    let (vocab, w_id) = vocab.add_neologism("w_check")?;
    let config = ModelConfig {
        n_layers: GRADCHECK_LAYERS,
        d_model: GRADCHECK_D_MODEL,
        n_heads: 2,
        context: 64,
        vocab_size: vocab.len(),
        base_size: vocab.base_size(),
    };
    let policy0 = ModelParams::<f64>::init(config, seed)?;
    let reference = policy0.snapshot();
    let words: Vec<u32> = (3..vocab.base_size() as u32).collect();
    let variants = [
        LossVariant::ApoUpStandard,
        LossVariant::DpoStandard,
        LossVariant::ApoUpAsPrinted,
        LossVariant::DpoAsPrinted,
    ];

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0, 0x6AD));
    let base_row: Vec<f64> = policy0.embedding_row(w_id)?.to_vec();
    let mut policy = policy0.snapshot();
    let mut examples = Vec::with_capacity(GRADCHECK_EXAMPLES);
    for ei in 0..GRADCHECK_EXAMPLES {
        let example = random_example(&mut rng, &words, w_id);
        let variant = variants[ei % variants.len()];
        let cfg = TrainConfig {
            variant,
            ..TrainConfig::default()
        };
        let (_, analytic) = embedding_gradient(&policy0, &reference, &example, w_id, &cfg)?;

        let mut numeric = Array1::<f64>::zeros(GRADCHECK_D_MODEL);
        let mut row = base_row.clone();
        for k in 0..GRADCHECK_D_MODEL {
            row[k] = base_row[k] + GRADCHECK_EPSILON;
            policy.set_embedding_row(w_id, &row)?;
            let plus = independent_loss(&policy, &reference, &example, cfg.beta, variant)?;
            row[k] = base_row[k] - GRADCHECK_EPSILON;
            policy.set_embedding_row(w_id, &row)?;
            let minus = independent_loss(&policy, &reference, &example, cfg.beta, variant)?;
            row[k] = base_row[k];
            numeric[k] = (plus - minus) / (2.0 * GRADCHECK_EPSILON);
        }
        policy.set_embedding_row(w_id, &base_row)?;

        let scale = analytic
            .iter()
            .chain(numeric.iter())
            .fold(0.0_f64, |m, &v| m.max(v.abs()));
        let err = if scale < 1e-12 {
            return Err(Error::Invariant(
                "gradient vanished on a random example".to_string(),
            ));
        } else {
            analytic
                .iter()
                .zip(numeric.iter())
                .fold(0.0_f64, |m, (&a, &n)| m.max((a - n).abs()))
                / scale
        };
        examples.push(err);
    }
    let max_rel_err = examples.iter().fold(0.0_f64, |m, &v| m.max(v));
    Ok(GradCheckReport {
        max_rel_err,
        pass: max_rel_err <= GRADCHECK_TOL,
        examples,
        epsilon: GRADCHECK_EPSILON,
        tolerance: GRADCHECK_TOL,
    })
}
