//! Measurement for taught words and the model around them.
//!
//! Four probes and a report format. The guessing module quantifies response
//! diversity through the secret-number game; the behaviour module measures
//! length compliance and scored quality and certifies that base-vocabulary
//! behaviour is untouched; the gradient check certifies the training
//! arithmetic itself. Every probe is deterministic given its seed and
//! returns raw per-unit outcomes next to the aggregates, so a report reader
//! can recompute every summary number.

mod behavior;
mod gradcheck;
mod guessing;
mod report;

pub use behavior::{
    invariance_check, length_satisfaction, quality_comparison, InvarianceOutcome, LengthEval,
    LengthOutcome, QualityEval, QualityOutcome, QUALITY_CONDITIONS,
};
pub use gradcheck::{
    gradient_check, GradCheckReport, GRADCHECK_EPSILON, GRADCHECK_EXAMPLES, GRADCHECK_TOL,
};
pub use guessing::{
    empirical_guess_distribution, guesses_from_texts, parse_guess, success_curve, uniform_success,
    EmpiricalGuesses, GuessDistribution, GUESS_MAX_NEW_TOKENS, MASS_TOL, N_DIGITS,
};
pub use report::{curve_columns, parse_curve_columns, EvalReport, ReportHeader};
