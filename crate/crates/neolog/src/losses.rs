//! Preference losses over paired response log-probabilities.
//!
//! All loss arithmetic is done in `f64` regardless of the model's working
//! precision: sequence log-probabilities are small sums, but the loss sits
//! behind exp/log and is consumed by gradient checks at tight tolerances.
//!
//! The published formula for the anchored-up loss adds the frozen reference
//! margin with a `+` sign, which contradicts the usual preference-loss
//! convention of subtracting it. Both readings are implemented and chosen by
//! [`LossVariant`]; the subtracting form is the default because it is the one
//! whose gradient vanishes nowhere useful and whose value at initialization
//! matches the classical constants (`ln 2` per sigmoid term).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Policy and frozen-reference log-probabilities for one preference pair.
///
/// `policy_*` come from the model being trained; `reference_*` from the same
/// model before training (frozen weights, original embedding row).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PairLogProbs {
    pub policy_chosen: f64,
    pub policy_rejected: f64,
    pub reference_chosen: f64,
    pub reference_rejected: f64,
}

impl PairLogProbs {
    pub fn new(
        policy_chosen: f64,
        policy_rejected: f64,
        reference_chosen: f64,
        reference_rejected: f64,
    ) -> Self {
        PairLogProbs {
            policy_chosen,
            policy_rejected,
            reference_chosen,
            reference_rejected,
        }
    }

    fn check_finite(&self) -> Result<()> {
        let all = [
            self.policy_chosen,
            self.policy_rejected,
            self.reference_chosen,
            self.reference_rejected,
        ];
        if all.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("pair log-probabilities"))
        }
    }
}

/// Which preference loss to optimize.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// Plain preference loss, reference margin subtracted.
    DpoStandard,
    /// Plain preference loss, reference margin added (as printed).
    DpoAsPrinted,
    /// Preference loss plus chosen-vs-reference anchor, margin subtracted.
    #[default]
    ApoUpStandard,
    /// Preference loss plus anchor, margin added (as printed).
    ApoUpAsPrinted,
}

impl LossVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "dpo_standard" => Ok(LossVariant::DpoStandard),
            "dpo_as_printed" => Ok(LossVariant::DpoAsPrinted),
            "apo_up_standard" => Ok(LossVariant::ApoUpStandard),
            "apo_up_as_printed" => Ok(LossVariant::ApoUpAsPrinted),
            other => Err(Error::InvalidConfig(format!("unknown loss variant {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossVariant::DpoStandard => "dpo_standard",
            LossVariant::DpoAsPrinted => "dpo_as_printed",
            LossVariant::ApoUpStandard => "apo_up_standard",
            LossVariant::ApoUpAsPrinted => "apo_up_as_printed",
        }
    }

    fn has_anchor(self) -> bool {
        matches!(self, LossVariant::ApoUpStandard | LossVariant::ApoUpAsPrinted)
    }

    /// +1.0 when the reference margin is added, -1.0 when subtracted.
    fn reference_sign(self) -> f64 {
        match self {
            LossVariant::DpoStandard | LossVariant::ApoUpStandard => -1.0,
            LossVariant::DpoAsPrinted | LossVariant::ApoUpAsPrinted => 1.0,
        }
    }
}

/// `log(1 + e^x)` without overflow for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-log sigmoid(z)`, numerically stable: equals `softplus(-z)`.
fn neg_log_sigmoid(z: f64) -> f64 {
    softplus(-z)
}

/// `sigmoid(z)` computed through the numerically safe branch.
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta.is_finite() && beta > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("beta must be finite and positive, got {beta}")))
    }
}

/// Argument of the preference sigmoid:
/// `beta * [(policy margin) + sign * (reference margin)]`.
fn preference_logit(lp: &PairLogProbs, beta: f64, sign: f64) -> f64 {
    let policy_margin = lp.policy_chosen - lp.policy_rejected;
    let reference_margin = lp.reference_chosen - lp.reference_rejected;
    beta * (policy_margin + sign * reference_margin)
}

/// Argument of the anchor sigmoid: `beta * (policy_chosen - reference_chosen)`.
fn anchor_logit(lp: &PairLogProbs, beta: f64) -> f64 {
    beta * (lp.policy_chosen - lp.reference_chosen)
}

/// The preference term alone (both `Dpo*` variants, and the first term of the
/// `ApoUp*` variants).
pub fn dpo_loss(lp: &PairLogProbs, beta: f64, variant: LossVariant) -> Result<f64> {
    lp.check_finite()?;
    check_beta(beta)?;
    Ok(neg_log_sigmoid(preference_logit(lp, beta, variant.reference_sign())))
}

/// The chosen-response anchor term: `-log sigmoid(beta * (lp_c - lp0_c))`.
pub fn anchor_loss(lp: &PairLogProbs, beta: f64) -> Result<f64> {
    lp.check_finite()?;
    check_beta(beta)?;
    Ok(neg_log_sigmoid(anchor_logit(lp, beta)))
}

/// Full loss for `variant`: the preference term, plus the anchor term for the
/// `ApoUp*` variants.
pub fn preference_loss(lp: &PairLogProbs, beta: f64, variant: LossVariant) -> Result<f64> {
    let mut loss = dpo_loss(lp, beta, variant)?;
    if variant.has_anchor() {
        loss += anchor_loss(lp, beta)?;
    }
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(loss)
}

/// Partial derivatives of [`preference_loss`] with respect to the two policy
/// log-probabilities (the reference values are constants).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossGrad {
    pub d_policy_chosen: f64,
    pub d_policy_rejected: f64,
}

/// Loss value together with its policy-side derivatives.
///
/// With `z` the preference logit and `u` the anchor logit:
/// `d/d lp_c [-log sigmoid(z)] = -beta * sigmoid(-z)`,
/// `d/d lp_r [-log sigmoid(z)] = +beta * sigmoid(-z)`, and the anchor adds
/// `-beta * sigmoid(-u)` to the chosen derivative.
pub fn preference_loss_and_grad(
    lp: &PairLogProbs,
    beta: f64,
    variant: LossVariant,
) -> Result<(f64, LossGrad)> {
    let loss = preference_loss(lp, beta, variant)?;
    let z = preference_logit(lp, beta, variant.reference_sign());
    let s = sigmoid(-z);
    let mut grad = LossGrad {
        d_policy_chosen: -beta * s,
        d_policy_rejected: beta * s,
    };
    if variant.has_anchor() {
        let u = anchor_logit(lp, beta);
        grad.d_policy_chosen += -beta * sigmoid(-u);
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN_2: f64 = std::f64::consts::LN_2;

    fn at_init(lp_c: f64, lp_r: f64) -> PairLogProbs {
        // Policy equals reference: the state before any training step.
        PairLogProbs::new(lp_c, lp_r, lp_c, lp_r)
    }

    #[test]
    fn standard_dpo_is_ln_2_at_initialization() {
        let lp = at_init(-12.5, -14.75);
        let loss = preference_loss(&lp, 0.2, LossVariant::DpoStandard).unwrap();
        assert!((loss - LN_2).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn standard_anchored_loss_is_two_ln_2_at_initialization() {
        let lp = at_init(-3.0, -9.0);
        let loss = preference_loss(&lp, 0.2, LossVariant::ApoUpStandard).unwrap();
        assert!((loss - 2.0 * LN_2).abs() < 1e-12, "got {loss}");
    }

    #[test]
    fn as_printed_dpo_doubles_the_margin_at_initialization() {
        // With the + sign the two margins add: z = 2*beta*(lp_c - lp_r).
        let (lp_c, lp_r, beta) = (-3.0, -7.0, 0.2);
        let lp = at_init(lp_c, lp_r);
        let loss = preference_loss(&lp, beta, LossVariant::DpoAsPrinted).unwrap();
        let expected = softplus(-2.0 * beta * (lp_c - lp_r));
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn anchored_variants_decompose_into_their_terms() {
        let lp = PairLogProbs::new(-11.0, -13.5, -12.0, -12.5);
        for variant in [LossVariant::ApoUpStandard, LossVariant::ApoUpAsPrinted] {
            let total = preference_loss(&lp, 0.2, variant).unwrap();
            let dpo = dpo_loss(&lp, 0.2, variant).unwrap();
            let anchor = anchor_loss(&lp, 0.2).unwrap();
            assert!((total - (dpo + anchor)).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_decreases_as_chosen_gains_probability() {
        let base = PairLogProbs::new(-12.0, -12.0, -12.0, -12.0);
        for variant in [
            LossVariant::DpoStandard,
            LossVariant::DpoAsPrinted,
            LossVariant::ApoUpStandard,
            LossVariant::ApoUpAsPrinted,
        ] {
            let mut prev = preference_loss(&base, 0.2, variant).unwrap();
            for step in 1..=5 {
                let mut lp = base;
                lp.policy_chosen += 0.5 * step as f64;
                let loss = preference_loss(&lp, 0.2, variant).unwrap();
                assert!(loss < prev, "{variant:?} not decreasing at step {step}");
                prev = loss;
            }
        }
    }

    #[test]
    fn loss_increases_as_rejected_gains_probability() {
        let base = PairLogProbs::new(-12.0, -12.0, -12.0, -12.0);
        for variant in [LossVariant::DpoStandard, LossVariant::ApoUpStandard] {
            let mut prev = preference_loss(&base, 0.2, variant).unwrap();
            for step in 1..=5 {
                let mut lp = base;
                lp.policy_rejected += 0.5 * step as f64;
                let loss = preference_loss(&lp, 0.2, variant).unwrap();
                assert!(loss > prev);
                prev = loss;
            }
        }
    }

    #[test]
    fn swapping_policy_pair_flips_the_preference_logit() {
        // -log sigmoid(z) + -log sigmoid(-z) = softplus(-z) + softplus(z)
        let lp = PairLogProbs::new(-10.0, -14.0, -12.0, -12.0);
        let swapped = PairLogProbs::new(-14.0, -10.0, -12.0, -12.0);
        let beta = 0.2;
        let z = beta * (lp.policy_chosen - lp.policy_rejected);
        let a = dpo_loss(&lp, beta, LossVariant::DpoStandard).unwrap();
        let b = dpo_loss(&swapped, beta, LossVariant::DpoStandard).unwrap();
        assert!((a + b - (softplus(z) + softplus(-z))).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_stay_finite() {
        for &m in &[1e4, -1e4, 5e4] {
            let lp = PairLogProbs::new(m, -m, 0.0, 0.0);
            for variant in [
                LossVariant::DpoStandard,
                LossVariant::DpoAsPrinted,
                LossVariant::ApoUpStandard,
                LossVariant::ApoUpAsPrinted,
            ] {
                let loss = preference_loss(&lp, 1.0, variant).unwrap();
                assert!(loss.is_finite(), "variant {variant:?} at margin {m}");
                assert!(loss >= 0.0);
            }
        }
    }

    #[test]
    fn softplus_matches_naive_form_in_safe_range() {
        for &x in &[-30.0, -2.0, -1e-8, 0.0, 1e-8, 2.0, 30.0] {
            let naive = (1.0 + f64::exp(x)).ln();
            assert!((softplus(x) - naive).abs() < 1e-12, "x={x}");
        }
        // and handles magnitudes where the naive form overflows
        assert!(softplus(1e4).is_finite());
        assert!((softplus(1e4) - 1e4).abs() < 1e-9);
        assert_eq!(softplus(-1e4), 0.0);
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let lp = PairLogProbs::new(f64::NAN, -1.0, -1.0, -1.0);
        assert!(matches!(
            preference_loss(&lp, 0.2, LossVariant::ApoUpStandard),
            Err(Error::NonFinite(_))
        ));
        let lp = PairLogProbs::new(-1.0, f64::NEG_INFINITY, -1.0, -1.0);
        assert!(preference_loss(&lp, 0.2, LossVariant::DpoStandard).is_err());
    }

    #[test]
    fn invalid_beta_is_rejected() {
        let lp = at_init(-1.0, -2.0);
        for beta in [0.0, -0.2, f64::NAN] {
            assert!(preference_loss(&lp, beta, LossVariant::ApoUpStandard).is_err());
        }
    }

    #[test]
    fn gradients_match_central_differences() {
        let lp = PairLogProbs::new(-11.0, -13.5, -12.0, -12.5);
        let beta = 0.2;
        let eps = 1e-6;
        for variant in [
            LossVariant::DpoStandard,
            LossVariant::DpoAsPrinted,
            LossVariant::ApoUpStandard,
            LossVariant::ApoUpAsPrinted,
        ] {
            let (_, grad) = preference_loss_and_grad(&lp, beta, variant).unwrap();
            let mut plus = lp;
            let mut minus = lp;
            plus.policy_chosen += eps;
            minus.policy_chosen -= eps;
            let fd_c = (preference_loss(&plus, beta, variant).unwrap()
                - preference_loss(&minus, beta, variant).unwrap())
                / (2.0 * eps);
            assert!((grad.d_policy_chosen - fd_c).abs() < 1e-8, "{variant:?} chosen");

            let mut plus = lp;
            let mut minus = lp;
            plus.policy_rejected += eps;
            minus.policy_rejected -= eps;
            let fd_r = (preference_loss(&plus, beta, variant).unwrap()
                - preference_loss(&minus, beta, variant).unwrap())
                / (2.0 * eps);
            assert!((grad.d_policy_rejected - fd_r).abs() < 1e-8, "{variant:?} rejected");
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for variant in [
            LossVariant::DpoStandard,
            LossVariant::DpoAsPrinted,
            LossVariant::ApoUpStandard,
            LossVariant::ApoUpAsPrinted,
        ] {
            assert_eq!(LossVariant::parse(variant.name()).unwrap(), variant);
        }
        assert!(LossVariant::parse("ipo").is_err());
    }
}
