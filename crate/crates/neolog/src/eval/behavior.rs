//! Behavioural probes for a taught word: length compliance, the frozen-model
//! certificate, and scored response quality.
//!
//! Each probe samples from deterministic per-item streams derived from one
//! root seed, so a rerun with the same artifacts reproduces every response,
//! not just the aggregates.

use serde::{Deserialize, Serialize};

use crate::datasets::{constraint_sentence, derive_seed, quality_sentence, LengthBucket, Scorer};
use crate::error::{Error, Result};
use crate::model::{forward_cached, sample, ModelParams, SamplerConfig};
use crate::scalar::Real;
use crate::tokenizer::{encode_prompt, word_count, TokenSeq, Vocabulary};

/// Generation headroom past a length bucket's upper bound, in tokens.
const LENGTH_SLACK: usize = 15;

/// Generation budget for quality responses; comfortably above the longest
/// high-quality answer the corpus teaches.
const QUALITY_MAX_NEW_TOKENS: usize = 64;

/// One instruction's result in a length-compliance run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthOutcome {
    pub instruction: String,
    pub response: String,
    pub words: usize,
    pub satisfied: bool,
}

/// Aggregate of [`length_satisfaction`]: the compliance rate plus the raw
/// per-instruction outcomes it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthEval {
    pub rate: f64,
    pub outcomes: Vec<LengthOutcome>,
}

/// Samples one response per instruction under the length-constraint prompt
/// and reports the fraction landing inside `bucket`, bounds inclusive.
///
/// `slot_surface` fills the constraint sentence's verb slot — the literal
/// baseline word or a taught surface — and must be in `vocab`. The prompt
/// shape matches the one the preference pairs train on.
pub fn length_satisfaction<S: Real>(
    params: &ModelParams<S>,
    vocab: &Vocabulary,
    instructions: &[String],
    bucket: LengthBucket,
    slot_surface: &str,
    seed: u64,
) -> Result<LengthEval> {
    if instructions.is_empty() {
        return Err(Error::InvalidConfig(
            "no instructions to evaluate".to_string(),
        ));
    }
    bucket.validate(params.config.context)?;
    if vocab.id_of(slot_surface).is_none() {
        return Err(Error::UnknownWord(slot_surface.to_string()));
    }
    let max_new = (bucket.hi + LENGTH_SLACK).min(params.config.context.saturating_sub(1));
    let mut outcomes = Vec::with_capacity(instructions.len());
    for (i, instr) in instructions.iter().enumerate() {
        let text = format!(
            "{instr} . {}",
            constraint_sentence(slot_surface, bucket.lo, bucket.hi)
        );
        let prompt = encode_prompt(vocab, &text)?;
        let cfg = SamplerConfig {
            temperature: 1.0,
            max_new_tokens: max_new,
            seed: derive_seed(seed, i as u64, 0x1E46),
        };
        let response = vocab.decode(&sample(params, &prompt, &cfg)?)?;
        let words = word_count(&response);
        outcomes.push(LengthOutcome {
            instruction: instr.clone(),
            response,
            words,
            satisfied: bucket.contains(words),
        });
    }
    let rate = outcomes.iter().filter(|o| o.satisfied).count() as f64 / outcomes.len() as f64;
    Ok(LengthEval { rate, outcomes })
}

/// Result of the frozen-model certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvarianceOutcome {
    /// True when every logit at every position is bit-identical.
    pub pass: bool,
    /// Largest absolute logit difference observed; `0` whenever `pass`.
    pub max_abs_diff: f64,
    pub n_prompts: usize,
    pub n_positions: usize,
}

/// Certifies that `before` and `after` assign bit-identical base-vocabulary
/// logits at every position of every prompt.
///
/// This is the teachability bargain made checkable: adding a word may only
/// touch behaviour on prompts that use it. The models must agree on
/// architecture and base vocabulary but may differ in extended vocabulary —
/// that is precisely the after-teaching shape. A prompt containing a
/// neologism id is a caller bug, not a certificate failure, and is rejected.
pub fn invariance_check<S: Real>(
    before: &ModelParams<S>,
    after: &ModelParams<S>,
    prompts: &[TokenSeq],
) -> Result<InvarianceOutcome> {
    if prompts.is_empty() {
        return Err(Error::InvalidConfig(
            "certificate needs at least one prompt".to_string(),
        ));
    }
    let (b, a) = (&before.config, &after.config);
    let same_arch = b.base_size == a.base_size
        && b.n_layers == a.n_layers
        && b.d_model == a.d_model
        && b.n_heads == a.n_heads
        && b.context == a.context;
    if !same_arch {
        return Err(Error::InvalidConfig(
            "models differ in architecture, not just extended vocabulary".to_string(),
        ));
    }
    let mut max_abs_diff = 0.0_f64;
    let mut bitwise = true;
    let mut n_positions = 0usize;
    for (i, prompt) in prompts.iter().enumerate() {
        for &id in prompt.ids() {
            if id as usize >= b.base_size {
                return Err(Error::InvalidConfig(format!(
                    "prompt {i} contains non-base id {id}; the certificate covers \
                     base-vocabulary prompts only"
                )));
            }
        }
        let (logits_before, _) = forward_cached(before, &[prompt.ids()])?;
        let (logits_after, _) = forward_cached(after, &[prompt.ids()])?;
        n_positions += prompt.len();
        for (x, y) in logits_before.iter().zip(logits_after.iter()) {
            let (xf, yf) = (x.as_f64(), y.as_f64());
            if xf.to_bits() != yf.to_bits() {
                bitwise = false;
            }
            max_abs_diff = max_abs_diff.max((xf - yf).abs());
        }
    }
    Ok(InvarianceOutcome {
        pass: bitwise && max_abs_diff == 0.0,
        max_abs_diff,
        n_prompts: prompts.len(),
        n_positions,
    })
}

/// The three prompt conditions measured by [`quality_comparison`], in
/// sampling order.
pub const QUALITY_CONDITIONS: [&str; 3] = ["baseline", "good", "not-good"];

/// One scored sample from a quality run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityOutcome {
    pub condition: String,
    pub instruction: String,
    pub response: String,
    pub score: u8,
}

/// Aggregate of [`quality_comparison`]: mean scores per condition plus every
/// scored sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityEval {
    /// Mean score of plain-instruction responses.
    pub baseline_mean: f64,
    /// Mean score when asking for an extremely `<w>` response.
    pub good_mean: f64,
    /// Mean score when asking for an extremely not-`<w>` response.
    pub not_good_mean: f64,
    pub outcomes: Vec<QualityOutcome>,
}

/// Scores sampled responses under three prompts built from each instruction:
/// the plain instruction, the intensified request for a `w_surface` response,
/// and its negation. Draws `n_per_condition` samples per condition, cycling
/// through `instructions`, each on its own derived stream.
///
/// The interesting contrasts are `good_mean` against `baseline_mean` (did
/// the taught word pull quality up?) and `not_good_mean` against both (does
/// negation steer the other way?).
pub fn quality_comparison<S: Real>(
    params: &ModelParams<S>,
    vocab: &Vocabulary,
    scorer: &dyn Scorer,
    instructions: &[String],
    w_surface: &str,
    n_per_condition: usize,
    seed: u64,
) -> Result<QualityEval> {
    if instructions.is_empty() || n_per_condition == 0 {
        return Err(Error::InvalidConfig(
            "quality comparison needs instructions and a positive sample count".to_string(),
        ));
    }
    let w_id = vocab
        .id_of(w_surface)
        .ok_or_else(|| Error::UnknownWord(w_surface.to_string()))?;
    if !vocab.is_neologism(w_id) {
        return Err(Error::InvalidConfig(format!(
            "`{w_surface}` is a base word; quality comparison measures a taught surface"
        )));
    }
    let mut outcomes = Vec::with_capacity(QUALITY_CONDITIONS.len() * n_per_condition);
    let mut means = [0.0_f64; 3];
    for (ci, condition) in QUALITY_CONDITIONS.iter().enumerate() {
        let mut total = 0u32;
        for j in 0..n_per_condition {
            let instr = &instructions[j % instructions.len()];
            let text = match ci {
                0 => format!("{instr} ."),
                1 => format!("{instr} . {}", quality_sentence(true, w_surface)),
                _ => format!(
                    "{instr} . {}",
                    quality_sentence(true, &format!("not {w_surface}"))
                ),
            };
            let prompt = encode_prompt(vocab, &text)?;
            let cfg = SamplerConfig {
                temperature: 1.0,
                max_new_tokens: QUALITY_MAX_NEW_TOKENS,
                seed: derive_seed(seed, ci as u64, j as u64),
            };
            let response = vocab.decode(&sample(params, &prompt, &cfg)?)?;
            let score = scorer.score(instr, &response);
            total += u32::from(score);
            outcomes.push(QualityOutcome {
                condition: condition.to_string(),
                instruction: instr.clone(),
                response,
                score,
            });
        }
        means[ci] = f64::from(total) / n_per_condition as f64;
    }
    Ok(QualityEval {
        baseline_mean: means[0],
        good_mean: means[1],
        not_good_mean: means[2],
        outcomes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_setup() -> (Vocabulary, ModelParams<f32>) {
        let vocab = Vocabulary::build(
            "tell me a story about the mountain river .\n\
             ensure insist that the response is between words - 1 2 3 4 5 6 7 8 9 0\n\
             give show you think is extremely not good and an integer select number :",
        )
        .unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context: 96,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        let params = ModelParams::<f32>::init(config, 9).unwrap();
        (vocab, params)
    }

    fn with_neologism(vocab: &Vocabulary, params: &ModelParams<f32>) -> (Vocabulary, ModelParams<f32>, u32) {
        let (extended, w_id) = vocab.add_neologism("good_w").unwrap();
        let mut taught = params.snapshot();
        let row: Vec<f32> = (0..16).map(|i| 0.01 * (i as f32 + 1.0)).collect();
        let got = taught.attach_embedding_row(&row).unwrap();
        assert_eq!(got, w_id);
        (extended, taught, w_id)
    }

    #[test]
    fn length_run_reports_per_instruction_outcomes() {
        let (vocab, params) = tiny_setup();
        let instructions = vec![
            "tell me a story about the mountain".to_string(),
            "tell me a story about the river".to_string(),
            "tell me a story about the story".to_string(),
        ];
        let bucket = LengthBucket { lo: 3, hi: 9 };
        let eval = length_satisfaction(&params, &vocab, &instructions, bucket, "ensure", 5).unwrap();
        assert_eq!(eval.outcomes.len(), 3);
        for o in &eval.outcomes {
            assert_eq!(o.words, word_count(&o.response));
            assert_eq!(o.satisfied, bucket.contains(o.words));
        }
        let manual =
            eval.outcomes.iter().filter(|o| o.satisfied).count() as f64 / 3.0;
        assert!((eval.rate - manual).abs() < 1e-12);

        let again =
            length_satisfaction(&params, &vocab, &instructions, bucket, "ensure", 5).unwrap();
        assert_eq!(eval, again);
    }

    #[test]
    fn length_run_rejects_bad_calls() {
        let (vocab, params) = tiny_setup();
        let instructions = vec!["tell me a story".to_string()];
        let bucket = LengthBucket { lo: 3, hi: 20 };
        assert!(matches!(
            length_satisfaction(&params, &vocab, &instructions, bucket, "absent", 5).unwrap_err(),
            Error::UnknownWord(w) if w == "absent"
        ));
        assert!(length_satisfaction(&params, &vocab, &[], bucket, "ensure", 5).is_err());
        let oversize = LengthBucket { lo: 3, hi: 200 };
        assert!(
            length_satisfaction(&params, &vocab, &instructions, oversize, "ensure", 5).is_err()
        );
    }

    #[test]
    fn certificate_passes_identical_models_and_extended_vocabularies() {
        let (vocab, params) = tiny_setup();
        let prompts = vec![
            encode_prompt(&vocab, "tell me a story about the river .").unwrap(),
            encode_prompt(&vocab, "select an integer between 1 and 9 .").unwrap(),
        ];
        let twin = params.snapshot();
        let out = invariance_check(&params, &twin, &prompts).unwrap();
        assert!(out.pass);
        assert_eq!(out.max_abs_diff, 0.0);
        assert_eq!(out.n_prompts, 2);
        assert_eq!(
            out.n_positions,
            prompts.iter().map(|p| p.len()).sum::<usize>()
        );

        // The after-teaching shape: one extra embedding row, everything else
        // untouched. Base prompts cannot see the new row.
        let (_, taught, _) = with_neologism(&vocab, &params);
        let out = invariance_check(&params, &taught, &prompts).unwrap();
        assert!(out.pass, "extra row must not disturb base prompts");
    }

    #[test]
    fn certificate_catches_a_tiny_perturbation() {
        let (vocab, params) = tiny_setup();
        let prompts = vec![encode_prompt(&vocab, "tell me a story about the river .").unwrap()];
        let mut bumped = params.snapshot();
        bumped.w_out[[0, 0]] += 1e-6;
        let out = invariance_check(&params, &bumped, &prompts).unwrap();
        assert!(!out.pass);
        assert!(out.max_abs_diff > 0.0);
    }

    #[test]
    fn certificate_rejects_neologism_prompts_and_shape_mismatches() {
        let (vocab, params) = tiny_setup();
        let (extended, taught, w_id) = with_neologism(&vocab, &params);
        let mut neo_prompt = encode_prompt(&extended, "tell me a story").unwrap();
        neo_prompt.push(w_id);
        assert!(matches!(
            invariance_check(&params, &taught, &[neo_prompt]).unwrap_err(),
            Error::InvalidConfig(_)
        ));

        let prompts = vec![encode_prompt(&vocab, "tell me a story").unwrap()];
        assert!(invariance_check(&params, &taught, &[]).is_err());
        let other_arch = ModelParams::<f32>::init(
            ModelConfig {
                n_layers: 2,
                ..params.config
            },
            9,
        )
        .unwrap();
        assert!(invariance_check(&params, &other_arch, &prompts).is_err());
    }

    struct ConstScorer(u8);
    impl Scorer for ConstScorer {
        fn score(&self, _prompt: &str, _response: &str) -> u8 {
            self.0
        }
    }

    #[test]
    fn quality_run_with_a_constant_scorer() {
        let (vocab, params) = tiny_setup();
        let (extended, taught, _) = with_neologism(&vocab, &params);
        let instructions = vec![
            "tell me a story about the mountain".to_string(),
            "tell me a story about the river".to_string(),
        ];
        let eval = quality_comparison(
            &taught,
            &extended,
            &ConstScorer(3),
            &instructions,
            "good_w",
            4,
            17,
        )
        .unwrap();
        assert_eq!(eval.baseline_mean, 3.0);
        assert_eq!(eval.good_mean, 3.0);
        assert_eq!(eval.not_good_mean, 3.0);
        assert_eq!(eval.outcomes.len(), 12);
        for (i, o) in eval.outcomes.iter().enumerate() {
            assert_eq!(o.condition, QUALITY_CONDITIONS[i / 4]);
            assert_eq!(o.score, 3);
        }
        let again = quality_comparison(
            &taught,
            &extended,
            &ConstScorer(3),
            &instructions,
            "good_w",
            4,
            17,
        )
        .unwrap();
        assert_eq!(eval, again);
        let _ = params;
    }

    #[test]
    fn quality_run_rejects_bad_calls() {
        let (vocab, params) = tiny_setup();
        let (extended, taught, _) = with_neologism(&vocab, &params);
        let instructions = vec!["tell me a story".to_string()];
        let scorer = ConstScorer(2);
        assert!(matches!(
            quality_comparison(&taught, &extended, &scorer, &instructions, "missing_w", 2, 0)
                .unwrap_err(),
            Error::UnknownWord(_)
        ));
        assert!(matches!(
            quality_comparison(&taught, &extended, &scorer, &instructions, "good", 2, 0)
                .unwrap_err(),
            Error::InvalidConfig(_)
        ));
        assert!(
            quality_comparison(&taught, &extended, &scorer, &instructions, "good_w", 0, 0)
                .is_err()
        );
        assert!(
            quality_comparison(&taught, &extended, &scorer, &[], "good_w", 2, 0).is_err()
        );
        let _ = params;
        let _ = vocab;
    }
}
