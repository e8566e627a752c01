//! The `eval` subcommand: five measurement kinds over a checkpoint and the
//! registry of taught words.
//!
//! Three kinds are behavioural (`length`, `diversity`, `quality`): they
//! sample responses, aggregate the outcome into an [`EvalReport`], and always
//! exit zero — thresholds are the caller's business. Two are certificates
//! (`invariance`, `gradcheck`): they verify a hard invariant and exit with
//! [`EXIT_INVARIANT`](crate::commands::EXIT_INVARIANT) when it is violated.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::commands::pretrain::sibling;
use crate::commands::{load_model, LoadedModel, EXIT_INVARIANT, EXIT_OK};
use crate::datasets::{
    constraint_sentence, derive_seed, instruction_split, ordinal_prefix, quality_sentence,
    RuleScorer, BIASED_PREFIX_WORD, BUCKET_B, CONSTRAINT_RANGES, DEFAULT_HELDOUT,
    DIVERSE_PREFIX_WORD, GUESS_INSTRUCTION, IGNORED_CONSTRAINT_WORD, MAX_CORPUS_ORDINAL,
    OBEYED_CONSTRAINT_WORD, QUALITY_WORD,
};
use crate::error::{Error, Result};
use crate::eval::{
    curve_columns, empirical_guess_distribution, gradient_check, invariance_check,
    length_satisfaction, quality_comparison, success_curve, uniform_success, EvalReport,
    ReportHeader,
};
use crate::manifest::{file_sha256, Manifest};
use crate::registry::Registry;
use crate::tokenizer::{encode_prompt, TokenSeq, Vocabulary};

/// Default taught surface per behavioural kind, matching the surfaces the
/// walkthrough teaches.
pub const DEFAULT_LENGTH_WORD: &str = "ensure_w";
pub const DEFAULT_DIVERSITY_WORD: &str = "give_w";
pub const DEFAULT_QUALITY_WORD: &str = "good_w";

/// Samples drawn per prompt when estimating a guess distribution.
const DIVERSITY_SAMPLES: usize = 400;
/// Largest guess budget on a reported success curve.
const DIVERSITY_CURVE_MAX: usize = 40;
/// Ordinal used in the taught diversity prompt; the smallest one the
/// preference pairs train.
const DIVERSITY_ORDINAL: usize = 2;
/// Samples per condition in the quality comparison.
const QUALITY_SAMPLES: usize = 50;
/// Prompts the frozen-model certificate must cover.
const INVARIANCE_MIN_PROMPTS: usize = 100;

/// What to measure.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalKind {
    Length,
    Diversity,
    Quality,
    Invariance,
    Gradcheck,
}

impl EvalKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "length" => Ok(EvalKind::Length),
            "diversity" => Ok(EvalKind::Diversity),
            "quality" => Ok(EvalKind::Quality),
            "invariance" => Ok(EvalKind::Invariance),
            "gradcheck" => Ok(EvalKind::Gradcheck),
            other => Err(Error::InvalidConfig(format!(
                "unknown eval kind {other:?}; expected length, diversity, quality, \
                 invariance, or gradcheck"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvalKind::Length => "length",
            EvalKind::Diversity => "diversity",
            EvalKind::Quality => "quality",
            EvalKind::Invariance => "invariance",
            EvalKind::Gradcheck => "gradcheck",
        }
    }

    /// Gradcheck builds its own fixture model; everything else measures a
    /// real checkpoint.
    fn needs_checkpoint(&self) -> bool {
        !matches!(self, EvalKind::Gradcheck)
    }
}

/// Result of [`cmd_eval`]: the full report, the process exit code, and a
/// one-line human summary.
#[derive(Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    pub exit: i32,
    pub summary: String,
}

/// Wraps a record with the condition it was measured under.
#[derive(Serialize)]
struct Conditioned<'a, T: Serialize> {
    condition: &'a str,
    #[serde(flatten)]
    record: &'a T,
}

struct KindRun {
    exit: i32,
    summary: String,
    extra_outputs: Vec<PathBuf>,
}

impl KindRun {
    fn ok(summary: String) -> Self {
        KindRun {
            exit: EXIT_OK,
            summary,
            extra_outputs: Vec::new(),
        }
    }
}

/// Runs one evaluation kind and, when `out` is given, writes the report plus
/// a manifest sidecar (and, for `diversity`, success-curve sidecars).
pub fn cmd_eval(
    kind: EvalKind,
    checkpoint: Option<&Path>,
    registry_path: Option<&Path>,
    word: Option<&str>,
    seed: u64,
    out: Option<&Path>,
) -> Result<EvalOutcome> {
    let loaded = match checkpoint {
        Some(path) => Some(load_model(path)?),
        None if kind.needs_checkpoint() => {
            return Err(Error::InvalidConfig(format!(
                "eval kind `{}` needs --checkpoint",
                kind.name()
            )))
        }
        None => None,
    };
    let registry = match registry_path {
        Some(path) => Registry::load_or_default(path)?,
        None => Registry::new(),
    };
    let registry_hash = match registry_path {
        Some(path) if path.exists() => file_sha256(path)?,
        _ => String::new(),
    };
    let header = ReportHeader {
        experiment: kind.name().to_string(),
        checkpoint_hash: loaded
            .as_ref()
            .map(|l| l.checkpoint_hash.clone())
            .unwrap_or_default(),
        registry_hash,
        seed,
    };
    let mut report = EvalReport::new(header);
    let run = match kind {
        EvalKind::Length => eval_length(&mut report, loaded.as_ref().unwrap(), &registry, word, seed)?,
        EvalKind::Diversity => eval_diversity(
            &mut report,
            loaded.as_ref().unwrap(),
            &registry,
            word,
            seed,
            out,
        )?,
        EvalKind::Quality => eval_quality(&mut report, loaded.as_ref().unwrap(), &registry, word, seed)?,
        EvalKind::Invariance => eval_invariance(&mut report, loaded.as_ref().unwrap(), &registry)?,
        EvalKind::Gradcheck => eval_gradcheck(&mut report, seed)?,
    };
    if let Some(path) = out {
        report.save(path)?;
        let mut manifest = Manifest::new("eval", seed);
        manifest.record_config("kind", kind.name());
        if let Some(w) = word {
            manifest.record_config("word", w);
        }
        if let Some(c) = checkpoint {
            manifest.record_input(c)?;
        }
        if let Some(r) = registry_path {
            if r.exists() {
                manifest.record_input(r)?;
            }
        }
        manifest.record_output(path)?;
        for extra in &run.extra_outputs {
            manifest.record_output(extra)?;
        }
        manifest.save_for(path)?;
    }
    Ok(EvalOutcome {
        report,
        exit: run.exit,
        summary: run.summary,
    })
}

/// Length compliance on the held-out instructions: the literal slot word
/// (whose constraint the base model learned to ignore) against the taught
/// surface, same bucket, same prompts.
fn eval_length(
    report: &mut EvalReport,
    loaded: &LoadedModel,
    registry: &Registry,
    word: Option<&str>,
    seed: u64,
) -> Result<KindRun> {
    let surface = word.unwrap_or(DEFAULT_LENGTH_WORD);
    let (vocab, params, _) = registry.attach(surface, &loaded.vocab, &loaded.params)?;
    let (_, held) = instruction_split(DEFAULT_HELDOUT);
    let baseline = length_satisfaction(
        &params,
        &vocab,
        &held,
        BUCKET_B,
        IGNORED_CONSTRAINT_WORD,
        seed,
    )?;
    let taught = length_satisfaction(&params, &vocab, &held, BUCKET_B, surface, seed)?;
    for outcome in &baseline.outcomes {
        report.push_record(&Conditioned {
            condition: "baseline",
            record: outcome,
        })?;
    }
    for outcome in &taught.outcomes {
        report.push_record(&Conditioned {
            condition: "neologism",
            record: outcome,
        })?;
    }
    report.set_aggregate("bucket", BUCKET_B.label())?;
    report.set_aggregate("n_instructions", held.len())?;
    report.set_aggregate("baseline_rate", baseline.rate)?;
    report.set_aggregate("neologism_rate", taught.rate)?;
    report.set_aggregate("gain", taught.rate - baseline.rate)?;
    Ok(KindRun::ok(format!(
        "length {}: in-bucket rate {:.3} with `{}`, {:.3} with `{}` ({:+.3})",
        BUCKET_B.label(),
        baseline.rate,
        IGNORED_CONSTRAINT_WORD,
        taught.rate,
        surface,
        taught.rate - baseline.rate,
    )))
}

/// Guess diversity on the 1..9 game: the plain instruction against the
/// taught ordinal prefix, reported as entropies and success curves next to
/// the uniform skyline.
fn eval_diversity(
    report: &mut EvalReport,
    loaded: &LoadedModel,
    registry: &Registry,
    word: Option<&str>,
    seed: u64,
    out: Option<&Path>,
) -> Result<KindRun> {
    let surface = word.unwrap_or(DEFAULT_DIVERSITY_WORD);
    let (vocab, params, _) = registry.attach(surface, &loaded.vocab, &loaded.params)?;
    let baseline_prompt = encode_prompt(&vocab, &format!("{GUESS_INSTRUCTION} ."))?;
    let taught_prompt = encode_prompt(
        &vocab,
        &format!(
            "{} {GUESS_INSTRUCTION} .",
            ordinal_prefix(surface, DIVERSITY_ORDINAL)
        ),
    )?;
    let baseline = empirical_guess_distribution(
        &params,
        &vocab,
        &baseline_prompt,
        DIVERSITY_SAMPLES,
        derive_seed(seed, 0, 0xD1F0),
    )?;
    let taught = empirical_guess_distribution(
        &params,
        &vocab,
        &taught_prompt,
        DIVERSITY_SAMPLES,
        derive_seed(seed, 1, 0xD1F0),
    )?;
    let baseline_curve = success_curve(&baseline.distribution, DIVERSITY_CURVE_MAX)?;
    let taught_curve = success_curve(&taught.distribution, DIVERSITY_CURVE_MAX)?;
    let skyline = uniform_success(10);

    report.push_record(&Conditioned {
        condition: "baseline",
        record: &baseline,
    })?;
    report.push_record(&Conditioned {
        condition: "neologism",
        record: &taught,
    })?;
    let baseline_entropy = baseline.distribution.entropy();
    let taught_entropy = taught.distribution.entropy();
    let (base_at_10, neo_at_10) = (baseline_curve[9], taught_curve[9]);
    report.set_aggregate("n_samples", DIVERSITY_SAMPLES)?;
    report.set_aggregate("baseline_entropy", baseline_entropy)?;
    report.set_aggregate("neologism_entropy", taught_entropy)?;
    report.set_aggregate("entropy_gain", taught_entropy - baseline_entropy)?;
    report.set_aggregate("baseline_success_at_10", base_at_10)?;
    report.set_aggregate("neologism_success_at_10", neo_at_10)?;
    report.set_aggregate("success_gain_at_10", neo_at_10 - base_at_10)?;
    report.set_aggregate("uniform_success_at_10", skyline)?;
    report.set_aggregate("baseline_refusal_rate", baseline.refusal_rate)?;
    report.set_aggregate("neologism_refusal_rate", taught.refusal_rate)?;
    report.set_aggregate("baseline_curve", &baseline_curve)?;
    report.set_aggregate("neologism_curve", &taught_curve)?;

    let mut extra_outputs = Vec::new();
    if let Some(path) = out {
        for (name, curve) in [
            (".baseline-curve.txt", &baseline_curve),
            (".neologism-curve.txt", &taught_curve),
        ] {
            let curve_path = sibling(path, name);
            std::fs::write(&curve_path, curve_columns(curve))
                .map_err(|e| Error::io(&curve_path, e))?;
            extra_outputs.push(curve_path);
        }
    }
    Ok(KindRun {
        exit: EXIT_OK,
        summary: format!(
            "diversity: entropy {baseline_entropy:.3} -> {taught_entropy:.3} nats \
             ({:+.3}), success@10 {base_at_10:.3} -> {neo_at_10:.3} (uniform skyline {skyline:.3})",
            taught_entropy - baseline_entropy,
        ),
        extra_outputs,
    })
}

/// Scored response quality under the plain instruction, the taught-surface
/// request, and its negation.
fn eval_quality(
    report: &mut EvalReport,
    loaded: &LoadedModel,
    registry: &Registry,
    word: Option<&str>,
    seed: u64,
) -> Result<KindRun> {
    let surface = word.unwrap_or(DEFAULT_QUALITY_WORD);
    let (vocab, params, _) = registry.attach(surface, &loaded.vocab, &loaded.params)?;
    let (_, held) = instruction_split(DEFAULT_HELDOUT);
    let scorer = RuleScorer::default();
    let eval = quality_comparison(
        &params,
        &vocab,
        &scorer,
        &held,
        surface,
        QUALITY_SAMPLES,
        seed,
    )?;
    for outcome in &eval.outcomes {
        report.push_record(outcome)?;
    }
    report.set_aggregate("n_per_condition", QUALITY_SAMPLES)?;
    report.set_aggregate("baseline_mean", eval.baseline_mean)?;
    report.set_aggregate("good_mean", eval.good_mean)?;
    report.set_aggregate("not_good_mean", eval.not_good_mean)?;
    report.set_aggregate("lift", eval.good_mean - eval.baseline_mean)?;
    report.set_aggregate("reversal_gap", eval.good_mean - eval.not_good_mean)?;
    Ok(KindRun::ok(format!(
        "quality: baseline {:.2}, `{surface}` {:.2}, `extremely not {surface}` {:.2}",
        eval.baseline_mean, eval.good_mean, eval.not_good_mean,
    )))
}

/// A deterministic battery of neologism-free prompts spanning every corpus
/// construction: plain instructions (held-out first), both constraint slot
/// words over every range, the guessing game, every corpus ordinal under
/// both prefixes, and every quality request form.
fn invariance_prompts(vocab: &Vocabulary) -> Result<Vec<TokenSeq>> {
    let (train, held) = instruction_split(DEFAULT_HELDOUT);
    let mut texts: Vec<String> = Vec::new();
    for instr in held.iter().chain(train.iter()).take(80) {
        texts.push(format!("{instr} ."));
    }
    for (i, &(lo, hi)) in CONSTRAINT_RANGES.iter().enumerate() {
        for slot in [IGNORED_CONSTRAINT_WORD, OBEYED_CONSTRAINT_WORD] {
            let instr = &train[(i * 2) % train.len()];
            texts.push(format!("{instr} . {}", constraint_sentence(slot, lo, hi)));
        }
    }
    texts.push(format!("{GUESS_INSTRUCTION} ."));
    for k in 1..=MAX_CORPUS_ORDINAL {
        for slot in [DIVERSE_PREFIX_WORD, BIASED_PREFIX_WORD] {
            texts.push(format!("{} {GUESS_INSTRUCTION} .", ordinal_prefix(slot, k)));
        }
    }
    for extremely in [false, true] {
        for adjective in [QUALITY_WORD, "bad", "not good"] {
            let instr = &train[texts.len() % train.len()];
            texts.push(format!(
                "{instr} . {}",
                quality_sentence(extremely, adjective)
            ));
        }
    }
    debug_assert!(texts.len() >= INVARIANCE_MIN_PROMPTS);
    texts
        .iter()
        .map(|t| encode_prompt(vocab, t))
        .collect()
}

/// The frozen-model certificate: attaching every registered word must leave
/// base-vocabulary logits bit-identical on every probe prompt.
fn eval_invariance(
    report: &mut EvalReport,
    loaded: &LoadedModel,
    registry: &Registry,
) -> Result<KindRun> {
    let (_, extended, ids) = registry.attach_all(&loaded.vocab, &loaded.params)?;
    let prompts = invariance_prompts(&loaded.vocab)?;
    let outcome = invariance_check(&loaded.params, &extended, &prompts)?;
    report.push_record(&outcome)?;
    report.set_aggregate("pass", outcome.pass)?;
    report.set_aggregate("max_abs_diff", outcome.max_abs_diff)?;
    report.set_aggregate("n_prompts", outcome.n_prompts)?;
    report.set_aggregate("n_positions", outcome.n_positions)?;
    report.set_aggregate("n_words", ids.len())?;
    let verdict = if outcome.pass { "pass" } else { "FAIL" };
    Ok(KindRun {
        exit: if outcome.pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: format!(
            "invariance: {verdict} over {} prompts ({} positions) with {} taught word(s); \
             max |logit delta| = {:e}",
            outcome.n_prompts,
            outcome.n_positions,
            ids.len(),
            outcome.max_abs_diff,
        ),
        extra_outputs: Vec::new(),
    })
}

/// The finite-difference gradient certificate on a fresh fixture model.
fn eval_gradcheck(report: &mut EvalReport, seed: u64) -> Result<KindRun> {
    let check = gradient_check(seed)?;
    for (i, err) in check.examples.iter().enumerate() {
        report.push_record(&serde_json::json!({ "example": i, "rel_err": err }))?;
    }
    report.set_aggregate("pass", check.pass)?;
    report.set_aggregate("max_rel_err", check.max_rel_err)?;
    report.set_aggregate("epsilon", check.epsilon)?;
    report.set_aggregate("tolerance", check.tolerance)?;
    report.set_aggregate("examples", check.examples.len())?;
    let verdict = if check.pass { "pass" } else { "FAIL" };
    Ok(KindRun {
        exit: if check.pass { EXIT_OK } else { EXIT_INVARIANT },
        summary: format!(
            "gradcheck: {verdict}; max relative error {:.3e} over {} examples (tolerance {:.0e})",
            check.max_rel_err,
            check.examples.len(),
            check.tolerance,
        ),
        extra_outputs: Vec::new(),
    })
}
