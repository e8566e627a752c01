//! Single-row preference training.
//!
//! Everything about the base model is frozen: the only trainable parameters
//! are the `d_model` entries of one neologism's embedding row. Each step
//! computes exact policy log-probabilities for a preference pair, the loss
//! from [`crate::losses`], and the exact gradient of that loss restricted to
//! the neologism row — then takes one Adam step on the row.
//!
//! Reference log-probabilities come from the frozen snapshot taken after the
//! row was initialised. They never change during a run, so they are computed
//! once per example and cached.

mod adam;

pub use adam::{AdamHyper, AdamState};

use ndarray::{Array1, Array2, ArrayView1, ArrayViewMut1, Ix1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datasets::PreferenceExample;
use crate::error::{Error, Result};
use crate::losses::{preference_loss_and_grad, LossVariant, PairLogProbs};
use crate::model::{
    backward, embedding_row_grad, forward_cached, log_softmax, random_embedding_row,
    sequence_logprob, BackwardScope, ModelParams,
};
use crate::scalar::Real;
use crate::tokenizer::{TokenSeq, Vocabulary, BOS_ID};

/// Sentinel accepted in [`TrainConfig::init_token`] for a seeded Gaussian
/// initialisation instead of copying an existing embedding.
pub const RANDOM_INIT_TOKEN: &str = "random";

/// Hyperparameters for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Stop once the smoothed loss has dropped this far below its first
    /// smoothed value.
    pub early_stop_delta: f64,
    /// Window for both the initial plain average and the running smoothing.
    pub smoothing_window: usize,
    pub max_steps: usize,
    /// Drives example shuffling, and the Gaussian draw under the `"random"`
    /// initialisation sentinel.
    pub seed: u64,
    pub variant: LossVariant,
    /// Base token whose embedding seeds the new row, or
    /// [`RANDOM_INIT_TOKEN`].
    pub init_token: String,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 0.2,
            learning_rate: 0.02,
            batch_size: 1,
            early_stop_delta: 0.2,
            smoothing_window: 50,
            max_steps: 5000,
            seed: 0,
            variant: LossVariant::default(),
            init_token: "ensure".to_string(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "beta must be positive, got {}",
                self.beta
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.smoothing_window == 0 || self.max_steps == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, smoothing_window and max_steps must be nonzero".to_string(),
            ));
        }
        if !(self.early_stop_delta.is_finite() && self.early_stop_delta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "early_stop_delta must be positive, got {}",
                self.early_stop_delta
            )));
        }
        Ok(())
    }

    /// Content hash of the serialised config, recorded in run records and
    /// manifests so runs are attributable to exact hyperparameters.
    pub fn content_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        format!("{:x}", hasher.finalize())
    }
}

/// Why a run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// Smoothed loss fell `early_stop_delta` below its first smoothed value.
    EarlyStop,
    MaxSteps,
}

/// Full trace of one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRunRecord {
    pub steps: usize,
    /// Batch-mean loss per optimisation step.
    pub losses: Vec<f64>,
    /// Smoothed loss per step; `None` until the window first fills.
    pub ema: Vec<Option<f64>>,
    /// First completed smoothed value (plain mean of the first window).
    pub baseline: Option<f64>,
    pub stop: StopReason,
    pub initial_row: Vec<f64>,
    pub final_row: Vec<f64>,
    pub config_hash: String,
}

impl TrainRunRecord {
    /// Line-delimited structured log of the run: one JSON object per step.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (i, loss) in self.losses.iter().enumerate() {
            let line = serde_json::json!({
                "step": i + 1,
                "loss": loss,
                "ema": self.ema[i],
            });
            out.push_str(&line.to_string());
            out.push('\n');
        }
        out
    }
}

/// Early-stopping rule: the first `window` losses form a plain-average
/// baseline, after which each loss folds into a running mean with weight
/// `1/window`; training stops once `baseline - smoothed >= delta`.
#[derive(Debug, Clone)]
pub struct EmaStop {
    window: usize,
    delta: f64,
    seen: usize,
    sum: f64,
    baseline: Option<f64>,
    ema: Option<f64>,
}

impl EmaStop {
    pub fn new(window: usize, delta: f64) -> Self {
        EmaStop {
            window,
            delta,
            seen: 0,
            sum: 0.0,
            baseline: None,
            ema: None,
        }
    }

    /// Feeds one loss; returns `true` when the stop condition is met.
    pub fn push(&mut self, loss: f64) -> bool {
        self.seen += 1;
        if self.seen < self.window {
            self.sum += loss;
            return false;
        }
        if self.seen == self.window {
            self.sum += loss;
            let mean = self.sum / self.window as f64;
            self.baseline = Some(mean);
            self.ema = Some(mean);
        } else {
            let ema = self.ema.expect("window already filled");
            self.ema = Some(ema + (loss - ema) / self.window as f64);
        }
        self.baseline.expect("set above") - self.ema.expect("set above") >= self.delta
    }

    pub fn baseline(&self) -> Option<f64> {
        self.baseline
    }

    pub fn smoothed(&self) -> Option<f64> {
        self.ema
    }
}

fn require_neologism_row<S: Real>(params: &ModelParams<S>, neo_id: u32) -> Result<()> {
    if (neo_id as usize) < params.config.base_size
        || (neo_id as usize) >= params.config.vocab_size
    {
        return Err(Error::InvalidConfig(format!(
            "token id {neo_id} is not a neologism row (base {}, vocab {})",
            params.config.base_size, params.config.vocab_size
        )));
    }
    Ok(())
}

/// Writes the starting embedding into row `w_id`: a copy of
/// `cfg.init_token`'s row, or a seeded Gaussian draw under the `"random"`
/// sentinel. No other row is touched.
pub fn init_neologism_embedding<S: Real>(
    params: &mut ModelParams<S>,
    vocab: &Vocabulary,
    w_id: u32,
    cfg: &TrainConfig,
) -> Result<()> {
    require_neologism_row(params, w_id)?;
    let row: Vec<S> = if cfg.init_token == RANDOM_INIT_TOKEN {
        random_embedding_row(params.config.d_model, cfg.seed)
    } else {
        let id = vocab
            .id_of(&cfg.init_token)
            .ok_or_else(|| Error::UnknownWord(cfg.init_token.clone()))?;
        if (id as usize) >= params.config.base_size {
            return Err(Error::InvalidConfig(format!(
                "init token {:?} is itself a neologism; initialise from a base token or {RANDOM_INIT_TOKEN:?}",
                cfg.init_token
            )));
        }
        params.embedding_row(id)?.to_vec()
    };
    params.set_embedding_row(w_id, &row)
}

fn validate_example<S: Real>(
    params: &ModelParams<S>,
    example: &PreferenceExample,
    neo_id: u32,
) -> Result<()> {
    if example.prompt.is_empty() || example.prompt.ids()[0] != BOS_ID {
        return Err(Error::MissingBos);
    }
    if !example.prompt.iter().any(|id| id == neo_id) {
        return Err(Error::NeologismMissingFromPrompt(neo_id));
    }
    for response in [&example.chosen, &example.rejected] {
        for id in response.iter() {
            if (id as usize) >= params.config.base_size {
                return Err(Error::NeologismInResponse(id));
            }
        }
    }
    if example.chosen == example.rejected {
        return Err(Error::DegeneratePair);
    }
    Ok(())
}

/// Log-probability of `response` and the gradient of `weight * logprob` with
/// respect to the neologism row, from one cached forward pass. Occurrences of
/// the neologism anywhere in the prompt all contribute (their input-gradient
/// rows are summed).
fn response_logprob_and_row_grad<S: Real>(
    params: &ModelParams<S>,
    prompt: &TokenSeq,
    response: &TokenSeq,
    neo_id: u32,
    weight: f64,
) -> Result<(f64, Array1<S>)> {
    let d = params.config.d_model;
    if response.is_empty() {
        return Ok((0.0, Array1::zeros(d)));
    }
    let full = prompt.concat(response);
    let (logits, cache) = forward_cached(params, &[full.ids()])?;
    let mut lp = 0.0f64;
    let mut d_logits = Array2::<S>::zeros(logits.dim());
    for (k, y) in response.iter().enumerate() {
        let row_idx = prompt.len() - 1 + k;
        let row: Vec<S> = logits.row(row_idx).to_vec();
        let lsm = log_softmax(&row);
        lp += lsm[y as usize];
        for (c, l) in lsm.iter().enumerate() {
            let p = l.exp();
            let indicator = if c == y as usize { 1.0 } else { 0.0 };
            d_logits[[row_idx, c]] = S::from_f64(weight * (indicator - p));
        }
    }
    let (d_input, _) = backward(params, &cache, &d_logits, BackwardScope::InputOnly);
    let grad = embedding_row_grad(&cache, &d_input, neo_id);
    Ok((lp, grad))
}

fn pair_logprobs_only<S: Real>(
    params: &ModelParams<S>,
    example: &PreferenceExample,
) -> Result<(f64, f64)> {
    Ok((
        sequence_logprob(params, &example.prompt, &example.chosen)?,
        sequence_logprob(params, &example.prompt, &example.rejected)?,
    ))
}

/// Loss and exact neologism-row gradient for one example, given cached
/// reference log-probabilities.
fn example_loss_and_grad<S: Real>(
    policy: &ModelParams<S>,
    example: &PreferenceExample,
    reference_lp: (f64, f64),
    neo_id: u32,
    cfg: &TrainConfig,
) -> Result<(f64, Array1<S>)> {
    validate_example(policy, example, neo_id)?;
    // First pass: values only, to evaluate the loss-gradient weights.
    let (lp_c, lp_r) = pair_logprobs_only(policy, example)?;
    let lp = PairLogProbs::new(lp_c, lp_r, reference_lp.0, reference_lp.1);
    let (loss, g) = preference_loss_and_grad(&lp, cfg.beta, cfg.variant)?;
    // Second pass: gradients, weighted by dL/dlp.
    let (_, grad_c) = response_logprob_and_row_grad(
        policy,
        &example.prompt,
        &example.chosen,
        neo_id,
        g.d_policy_chosen,
    )?;
    let (_, grad_r) = response_logprob_and_row_grad(
        policy,
        &example.prompt,
        &example.rejected,
        neo_id,
        g.d_policy_rejected,
    )?;
    Ok((loss, grad_c + grad_r))
}

/// Exact gradient of the configured loss with respect to the neologism row
/// only, plus the loss value. Reference log-probabilities are recomputed from
/// `reference`; no gradient flows through it.
pub fn embedding_gradient<S: Real>(
    policy: &ModelParams<S>,
    reference: &ModelParams<S>,
    example: &PreferenceExample,
    neo_id: u32,
    cfg: &TrainConfig,
) -> Result<(f64, Array1<S>)> {
    validate_example(reference, example, neo_id)?;
    let reference_lp = pair_logprobs_only(reference, example)?;
    example_loss_and_grad(policy, example, reference_lp, neo_id, cfg)
}

/// One Adam update of the embedding row. Rejects non-finite gradients before
/// they can poison the optimizer state.
pub fn optimizer_step<S: Real>(
    row: ArrayViewMut1<'_, S>,
    grad: ArrayView1<'_, S>,
    state: &mut AdamState<S, Ix1>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grad.iter().any(|v| !v.as_f64().is_finite()) {
        return Err(Error::NonFinite("embedding row gradient"));
    }
    state.step(row, grad, cfg.learning_rate, &AdamHyper::default());
    Ok(())
}

/// Runs preference training on one neologism row.
///
/// `reference` is the frozen snapshot taken after row initialisation; at
/// entry it must equal `params` outside row `neo_id`. On return, `params`
/// differs from `reference` in row `neo_id` only — verified, not assumed.
pub fn train_neologism<S: Real>(
    params: &mut ModelParams<S>,
    reference: &ModelParams<S>,
    neo_id: u32,
    dataset: &[PreferenceExample],
    cfg: &TrainConfig,
) -> Result<TrainRunRecord> {
    cfg.validate()?;
    require_neologism_row(params, neo_id)?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig(
            "preference dataset is empty".to_string(),
        ));
    }
    if params.config != reference.config {
        return Err(Error::InvalidConfig(
            "policy and reference model shapes differ".to_string(),
        ));
    }
    if params.max_abs_diff_excluding_row(reference, neo_id) != 0.0 {
        return Err(Error::InvalidConfig(
            "policy and reference already disagree outside the trainable row".to_string(),
        ));
    }
    for example in dataset {
        validate_example(params, example, neo_id)?;
    }

    let initial_row: Vec<f64> = params
        .embedding_row(neo_id)?
        .iter()
        .map(|v| v.as_f64())
        .collect();
    // Reference log-probabilities are constants of the run: one pass, cached.
    let reference_lps: Vec<(f64, f64)> = dataset
        .iter()
        .map(|ex| pair_logprobs_only(reference, ex))
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut adam = AdamState::zeros_like(&Array1::<S>::zeros(params.config.d_model));
    let mut stopper = EmaStop::new(cfg.smoothing_window, cfg.early_stop_delta);
    let mut losses = Vec::new();
    let mut ema_trace = Vec::new();
    let mut stop = StopReason::MaxSteps;
    let mut step = 0usize;

    'run: loop {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = Array1::<S>::zeros(params.config.d_model);
            let mut loss_sum = 0.0;
            // Deterministic reduction: accumulate in example-index order.
            for &idx in batch {
                let (loss, g) =
                    example_loss_and_grad(params, &dataset[idx], reference_lps[idx], neo_id, cfg)?;
                loss_sum += loss;
                grad += &g;
            }
            let inv = S::from_f64(1.0 / batch.len() as f64);
            grad.mapv_inplace(|v| v * inv);
            let batch_loss = loss_sum / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }

            step += 1;
            optimizer_step(
                params.embedding.row_mut(neo_id as usize),
                grad.view(),
                &mut adam,
                cfg,
            )?;

            let hit = stopper.push(batch_loss);
            losses.push(batch_loss);
            ema_trace.push(stopper.smoothed());
            if hit {
                stop = StopReason::EarlyStop;
                break 'run;
            }
            if step >= cfg.max_steps {
                break 'run;
            }
        }
    }

    let drift = params.max_abs_diff_excluding_row(reference, neo_id);
    if drift != 0.0 {
        return Err(Error::Invariant(format!(
            "frozen weights drifted by {drift} during neologism training"
        )));
    }

    let final_row: Vec<f64> = params
        .embedding_row(neo_id)?
        .iter()
        .map(|v| v.as_f64())
        .collect();
    Ok(TrainRunRecord {
        steps: step,
        losses,
        ema: ema_trace,
        baseline: stopper.baseline(),
        stop,
        initial_row,
        final_row,
        config_hash: cfg.content_hash(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::tokenizer::EOS_ID;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn tiny(vocab: usize, base: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            context: 24,
            vocab_size: vocab,
            base_size: base,
        }
    }

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    /// f64 model with one neologism row attached, id = base.
    fn fixture(seed: u64) -> (ModelParams<f64>, u32) {
        let mut params = ModelParams::<f64>::init(tiny(10, 10), seed).unwrap();
        let row = random_embedding_row::<f64>(16, seed ^ 0xabcd);
        let neo = params.attach_embedding_row(&row).unwrap();
        (params, neo)
    }

    fn example(neo: u32) -> PreferenceExample {
        PreferenceExample {
            prompt: TokenSeq::new(vec![BOS_ID, 4, neo, 6]),
            chosen: TokenSeq::new(vec![3, 7, EOS_ID]),
            rejected: TokenSeq::new(vec![8, EOS_ID]),
            tag: "test".to_string(),
        }
    }

    #[test]
    fn init_copy_token_copies_the_exact_row() {
        let vocab = Vocabulary::build("give me ensure now").unwrap();
        let (vocab, neo) = vocab.add_neologism("ensure_w").unwrap();
        let config = tiny(vocab.len(), vocab.base_size());
        let mut params = ModelParams::<f32>::init(config, 5).unwrap();
        let before = params.snapshot();
        init_neologism_embedding(&mut params, &vocab, neo, &cfg()).unwrap();
        let src = vocab.id_of("ensure").unwrap();
        assert_eq!(
            params.embedding_row(neo).unwrap().to_vec(),
            params.embedding_row(src).unwrap().to_vec()
        );
        // every non-w row bit-identical
        assert_eq!(params.max_abs_diff_excluding_row(&before, neo), 0.0);
    }

    #[test]
    fn init_unknown_token_errors() {
        let vocab = Vocabulary::build("give me").unwrap();
        let (vocab, neo) = vocab.add_neologism("w_&").unwrap();
        let mut params = ModelParams::<f32>::init(tiny(6, 5), 5).unwrap();
        let bad = TrainConfig {
            init_token: "bogus".to_string(),
            ..cfg()
        };
        assert!(matches!(
            init_neologism_embedding(&mut params, &vocab, neo, &bad),
            Err(Error::UnknownWord(_))
        ));
        // and a base-vocabulary id is not a valid trainable row
        assert!(init_neologism_embedding(&mut params, &vocab, 2, &cfg()).is_err());
    }

    #[test]
    fn init_random_is_seeded_and_has_expected_scale() {
        let vocab = Vocabulary::build("give me").unwrap();
        let (vocab, neo) = vocab.add_neologism("w_&").unwrap();
        let config = ModelConfig {
            d_model: 128,
            ..tiny(6, 5)
        };
        let params = ModelParams::<f64>::init(config, 5).unwrap();
        let random = |seed: u64| {
            let mut p = params.clone();
            let c = TrainConfig {
                init_token: RANDOM_INIT_TOKEN.to_string(),
                seed,
                ..cfg()
            };
            init_neologism_embedding(&mut p, &vocab, neo, &c).unwrap();
            p.embedding_row(neo).unwrap().to_vec()
        };
        let a = random(9);
        assert_eq!(a, random(9));
        assert_ne!(a, random(10));
        let rms = (a.iter().map(|v| v * v).sum::<f64>() / a.len() as f64).sqrt();
        assert!((rms - 0.02).abs() < 0.01, "rms {rms}");
        let _ = params;
    }

    #[test]
    fn gradient_matches_finite_differences_through_the_row() {
        let (params, neo) = fixture(71);
        let reference = params.snapshot();
        let ex = example(neo);
        let (loss0, grad) = embedding_gradient(&params, &reference, &ex, neo, &cfg()).unwrap();
        assert!(loss0.is_finite());

        let reference_lp = pair_logprobs_only(&reference, &ex).unwrap();
        let loss_at = |row: &[f64]| {
            let mut p = params.clone();
            p.set_embedding_row(neo, row).unwrap();
            let (lp_c, lp_r) = pair_logprobs_only(&p, &ex).unwrap();
            let lp = PairLogProbs::new(lp_c, lp_r, reference_lp.0, reference_lp.1);
            crate::losses::preference_loss(&lp, 0.2, LossVariant::ApoUpStandard).unwrap()
        };
        let base_row: Vec<f64> = params.embedding_row(neo).unwrap().to_vec();
        let eps = 1e-5;
        for slot in [0usize, 5, 11, 15] {
            let mut plus = base_row.clone();
            plus[slot] += eps;
            let mut minus = base_row.clone();
            minus[slot] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let abs = (grad[slot] - fd).abs();
            let rel = abs / grad[slot].abs().max(fd.abs()).max(1e-6);
            assert!(abs < 1e-9 || rel < 1e-6, "slot {slot}: {} vs {fd}", grad[slot]);
        }
    }

    #[test]
    fn gradient_sums_over_repeated_neologism_occurrences() {
        let (params, neo) = fixture(73);
        let reference = params.snapshot();
        let double = PreferenceExample {
            prompt: TokenSeq::new(vec![BOS_ID, neo, 4, neo]),
            chosen: TokenSeq::new(vec![3, EOS_ID]),
            rejected: TokenSeq::new(vec![8, EOS_ID]),
            tag: "test".to_string(),
        };
        let (_, grad) = embedding_gradient(&params, &reference, &double, neo, &cfg()).unwrap();
        // Finite differences see the row change at *both* positions, so
        // agreement here proves the occurrences were summed.
        let reference_lp = pair_logprobs_only(&reference, &double).unwrap();
        let loss_at = |row: &[f64]| {
            let mut p = params.clone();
            p.set_embedding_row(neo, row).unwrap();
            let (lp_c, lp_r) = pair_logprobs_only(&p, &double).unwrap();
            let lp = PairLogProbs::new(lp_c, lp_r, reference_lp.0, reference_lp.1);
            crate::losses::preference_loss(&lp, 0.2, LossVariant::ApoUpStandard).unwrap()
        };
        let base_row: Vec<f64> = params.embedding_row(neo).unwrap().to_vec();
        let eps = 1e-5;
        for slot in [2usize, 9] {
            let mut plus = base_row.clone();
            plus[slot] += eps;
            let mut minus = base_row.clone();
            minus[slot] -= eps;
            let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let abs = (grad[slot] - fd).abs();
            let rel = abs / grad[slot].abs().max(fd.abs()).max(1e-6);
            assert!(abs < 1e-9 || rel < 1e-6, "slot {slot}: {} vs {fd}", grad[slot]);
        }
    }

    #[test]
    fn missing_neologism_in_prompt_is_an_error() {
        let (params, neo) = fixture(3);
        let reference = params.snapshot();
        let mut ex = example(neo);
        ex.prompt = TokenSeq::new(vec![BOS_ID, 4, 6]);
        assert!(matches!(
            embedding_gradient(&params, &reference, &ex, neo, &cfg()),
            Err(Error::NeologismMissingFromPrompt(_))
        ));
    }

    #[test]
    fn empty_chosen_side_contributes_zero_gradient() {
        let (params, neo) = fixture(5);
        let reference = params.snapshot();
        // Both responses empty would be degenerate:
        let ex = PreferenceExample {
            prompt: TokenSeq::new(vec![BOS_ID, neo]),
            chosen: TokenSeq::default(),
            rejected: TokenSeq::default(),
            tag: "test".to_string(),
        };
        assert!(matches!(
            embedding_gradient(&params, &reference, &ex, neo, &cfg()),
            Err(Error::DegeneratePair)
        ));
        // With no chosen tokens there is no position whose prediction can see
        // the neologism on that side: its gradient contribution is exactly
        // zero, leaving only the rejected side's term.
        let ex = PreferenceExample {
            prompt: TokenSeq::new(vec![BOS_ID, neo]),
            chosen: TokenSeq::default(),
            rejected: TokenSeq::new(vec![3, EOS_ID]),
            tag: "test".to_string(),
        };
        let dpo_cfg = TrainConfig {
            variant: LossVariant::DpoStandard,
            ..cfg()
        };
        let (_, grad_total) = embedding_gradient(&params, &reference, &ex, neo, &dpo_cfg).unwrap();
        let (lp_r, grad_r_unit) =
            response_logprob_and_row_grad(&params, &ex.prompt, &ex.rejected, neo, 1.0).unwrap();
        assert!(lp_r.is_finite());
        // total = 0 (chosen side) + beta * sigmoid(-z) * unit rejected grad,
        // and z = 0 because policy equals reference.
        let weight = 0.2 * 0.5;
        for i in 0..16 {
            assert!((grad_total[i] - weight * grad_r_unit[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_at_initialization_matches_the_analytic_constants() {
        let (params, neo) = fixture(7);
        let reference = params.snapshot(); // identical to policy
        let (loss, _) = embedding_gradient(&params, &reference, &example(neo), neo, &cfg()).unwrap();
        assert!((loss - 2.0 * LN_2).abs() < 1e-9, "apo loss {loss}");
        let dpo_cfg = TrainConfig {
            variant: LossVariant::DpoStandard,
            ..cfg()
        };
        let (loss, _) = embedding_gradient(&params, &reference, &example(neo), neo, &dpo_cfg).unwrap();
        assert!((loss - LN_2).abs() < 1e-9, "dpo loss {loss}");
    }

    #[test]
    fn batch_gradient_is_the_mean_of_example_gradients() {
        let (mut params, neo) = fixture(11);
        let examples = vec![
            example(neo),
            PreferenceExample {
                prompt: TokenSeq::new(vec![BOS_ID, neo, 2]),
                chosen: TokenSeq::new(vec![5, EOS_ID]),
                rejected: TokenSeq::new(vec![9, 9, EOS_ID]),
                tag: "test".to_string(),
            },
        ];
        let reference = params.snapshot();
        // Mean of the two single-example gradients...
        let mut manual = Array1::<f64>::zeros(16);
        for ex in &examples {
            let (_, g) = embedding_gradient(&params, &reference, ex, neo, &cfg()).unwrap();
            manual += &g;
        }
        manual.mapv_inplace(|v| v / 2.0);
        // ...must match the direction one batch-of-two Adam step applies
        // (the first step moves each slot by lr * sign(gradient)).
        let before: Vec<f64> = params.embedding_row(neo).unwrap().to_vec();
        let config = TrainConfig {
            batch_size: 2,
            max_steps: 1,
            ..cfg()
        };
        train_neologism(&mut params, &reference, neo, &examples, &config).unwrap();
        let after: Vec<f64> = params.embedding_row(neo).unwrap().to_vec();
        for i in 0..16 {
            let moved = after[i] - before[i];
            if manual[i].abs() > 1e-12 {
                assert!(
                    (moved < 0.0) == (manual[i] > 0.0),
                    "slot {i}: moved {moved}, grad {}",
                    manual[i]
                );
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_touches_only_the_row() {
        let build = || {
            let (mut params, neo) = fixture(23);
            let reference = params.snapshot();
            let examples = vec![example(neo)];
            let config = TrainConfig {
                max_steps: 25,
                smoothing_window: 5,
                ..cfg()
            };
            let record =
                train_neologism(&mut params, &reference, neo, &examples, &config).unwrap();
            (params, reference, neo, record)
        };
        let (p1, reference, neo, r1) = build();
        let (p2, _, _, r2) = build();
        assert_eq!(p1, p2);
        assert_eq!(r1.losses, r2.losses);
        assert_eq!(r1.final_row, r2.final_row);

        assert_eq!(p1.max_abs_diff_excluding_row(&reference, neo), 0.0);
        assert_ne!(
            p1.embedding_row(neo).unwrap().to_vec(),
            reference.embedding_row(neo).unwrap().to_vec()
        );
        assert_eq!(r1.losses.len(), r1.steps);
        assert_eq!(r1.initial_row, reference.embedding_row(neo).unwrap().to_vec());
    }

    #[test]
    fn training_descends_even_on_an_untrained_model() {
        // A randomly initialised model gives the row little leverage (layer
        // norms cap its reach), so only descent is asserted here; meaningful
        // loss drops are exercised on the steerable model below.
        let (mut params, neo) = fixture(31);
        let reference = params.snapshot();
        let config = TrainConfig {
            max_steps: 120,
            smoothing_window: 10,
            early_stop_delta: 0.35,
            ..cfg()
        };
        let record =
            train_neologism(&mut params, &reference, neo, &[example(neo)], &config).unwrap();
        let first = record.losses[0];
        let last = *record.losses.last().unwrap();
        assert!((first - 2.0 * LN_2).abs() < 1e-9, "start is the analytic value");
        assert!(last < first - 2e-3, "no descent: first {first}, last {last}");
    }

    /// A model where the neologism row has real leverage: one layer with
    /// uniform attention (zero query/key), identity value and output
    /// projections, dead MLP, identity-ish unembedding. Every response
    /// position then sees the normalised neologism embedding additively in
    /// its logits, so preference training can open a wide margin.
    fn steerable_fixture() -> (ModelParams<f64>, u32) {
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context: 24,
            vocab_size: 10,
            base_size: 10,
        };
        let mut params = ModelParams::<f64>::zeros(config).unwrap();
        let seeded = ModelParams::<f64>::init(config, 3).unwrap();
        params.embedding = seeded.embedding;
        params.positional = seeded.positional;
        let d = 16;
        let layer = &mut params.layers[0];
        layer.ln1_gamma.fill(1.0);
        layer.ln2_gamma.fill(1.0);
        for i in 0..d {
            layer.w_qkv[[i, 2 * d + i]] = 1.0; // value = normalised input
            layer.w_o[[i, i]] = 1.0;
        }
        params.lnf_gamma.fill(1.0);
        for i in 0..10 {
            params.w_out[[i, i]] = 1.0;
        }
        let row = random_embedding_row::<f64>(16, 99);
        let neo = params.attach_embedding_row(&row).unwrap();
        (params, neo)
    }

    #[test]
    fn steerable_model_reaches_the_default_early_stop() {
        let (mut params, neo) = steerable_fixture();
        let reference = params.snapshot();
        let examples = vec![example(neo)];
        // A learning rate slow enough that the descent is still in progress
        // when the smoothing window first completes; the smoothed loss then
        // falls past the 0.2 threshold and triggers the stop.
        let config = TrainConfig {
            learning_rate: 0.002,
            smoothing_window: 20,
            max_steps: 3000,
            ..cfg()
        };
        let record = train_neologism(&mut params, &reference, neo, &examples, &config).unwrap();
        assert_eq!(record.stop, StopReason::EarlyStop, "steps: {}", record.steps);
        let baseline = record.baseline.unwrap();
        let final_ema = record.ema.last().unwrap().unwrap();
        assert!(baseline - final_ema >= 0.2);
        let first = record.losses[0];
        let last = *record.losses.last().unwrap();
        assert!(last < first - 0.25, "first {first}, last {last}");
    }

    #[test]
    fn max_steps_is_respected_and_recorded() {
        let (mut params, neo) = fixture(37);
        let reference = params.snapshot();
        let config = TrainConfig {
            max_steps: 7,
            // window larger than max_steps: early stop can never trigger
            smoothing_window: 100,
            ..cfg()
        };
        let record =
            train_neologism(&mut params, &reference, neo, &[example(neo)], &config).unwrap();
        assert_eq!(record.steps, 7);
        assert_eq!(record.losses.len(), 7);
        assert_eq!(record.stop, StopReason::MaxSteps);
        assert!(record.baseline.is_none());
        assert!(record.ema.iter().all(|e| e.is_none()));
    }

    #[test]
    fn ema_stop_matches_hand_computed_schedule() {
        // window 3, delta 0.2; baseline = mean(1,1,1) = 1.
        // 0.9 -> 0.96667; 0.8 -> 0.91111; 0.7 -> 0.84074; 0.6 -> 0.76049
        // baseline - smoothed crosses 0.2 exactly at the 0.6 push.
        let mut s = EmaStop::new(3, 0.2);
        assert!(!s.push(1.0));
        assert!(!s.push(1.0));
        assert!(!s.push(1.0));
        assert_eq!(s.baseline(), Some(1.0));
        assert!(!s.push(0.9));
        assert!((s.smoothed().unwrap() - 0.9666666666666667).abs() < 1e-12);
        assert!(!s.push(0.8));
        assert!((s.smoothed().unwrap() - 0.9111111111111112).abs() < 1e-12);
        assert!(!s.push(0.7));
        assert!((s.smoothed().unwrap() - 0.8407407407407408).abs() < 1e-12);
        assert!(s.push(0.6));
        assert!((s.smoothed().unwrap() - 0.7604938271604939).abs() < 1e-12);
    }

    #[test]
    fn run_record_round_trips_through_json() {
        let (mut params, neo) = fixture(41);
        let reference = params.snapshot();
        let config = TrainConfig {
            max_steps: 3,
            ..cfg()
        };
        let record =
            train_neologism(&mut params, &reference, neo, &[example(neo)], &config).unwrap();
        let json = serde_json::to_string(&record).unwrap();
        let back: TrainRunRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back.losses, record.losses);
        assert_eq!(back.final_row, record.final_row);
        assert_eq!(back.config_hash, config.content_hash());
        // The JSONL log has one line per step with the same values.
        let jsonl = record.to_jsonl();
        assert_eq!(jsonl.lines().count(), record.steps);
        let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 1);
        assert_eq!(first["loss"].as_f64().unwrap(), record.losses[0]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let (mut params, neo) = fixture(43);
        let reference = params.snapshot();
        for config in [
            TrainConfig {
                learning_rate: 0.0,
                ..cfg()
            },
            TrainConfig {
                batch_size: 0,
                ..cfg()
            },
            TrainConfig {
                beta: -1.0,
                ..cfg()
            },
        ] {
            assert!(
                train_neologism(&mut params, &reference, neo, &[example(neo)], &config).is_err()
            );
        }
        // Training a base token is refused outright.
        assert!(train_neologism(&mut params, &reference, 3, &[example(neo)], &cfg()).is_err());
        // As is an empty dataset.
        assert!(train_neologism(&mut params, &reference, neo, &[], &cfg()).is_err());
        // And a reference that differs outside the trainable row.
        let mut off = reference.clone();
        off.w_out[[0, 0]] += 1.0;
        assert!(train_neologism(&mut params, &off, neo, &[example(neo)], &cfg()).is_err());
    }
}
