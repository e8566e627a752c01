//! Flat `key = value` configuration files.
//!
//! Every command takes one optional config file in the same format: one
//! assignment per line, `#` comments, blank lines ignored. Keys are
//! command-specific; an unknown key is an error naming it, so a typo cannot
//! silently fall back to a default.

use std::collections::BTreeMap;
use std::path::Path;

use crate::datasets::CorpusSpec;
use crate::error::{Error, Result};
use crate::losses::LossVariant;
use crate::trainer::TrainConfig;

/// Parses `key = value` lines into a map, rejecting duplicate keys.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::InvalidConfig(format!(
                "line {} is not a `key = value` assignment: {raw:?}",
                i + 1
            ))
        })?;
        let (key, value) = (key.trim().to_string(), value.trim().to_string());
        if key.is_empty() || value.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "line {} has an empty key or value: {raw:?}",
                i + 1
            )));
        }
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::InvalidConfig(format!(
                "duplicate key `{key}` on line {}",
                i + 1
            )));
        }
    }
    Ok(map)
}

/// Reads and parses a config file.
pub fn read_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text)
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::InvalidConfig(format!(
            "key `{key}` has unparseable value {value:?}"
        ))
    })
}

/// Takes a key out of the map and parses it, leaving absent keys at their
/// default. After all appliers ran, leftover keys are unknown.
fn take<T: std::str::FromStr>(
    map: &mut BTreeMap<String, String>,
    key: &str,
    slot: &mut T,
) -> Result<()> {
    if let Some(value) = map.remove(key) {
        *slot = parse_value(key, &value)?;
    }
    Ok(())
}

/// Fails on any key no applier consumed.
pub fn reject_unknown(map: &BTreeMap<String, String>) -> Result<()> {
    if let Some(key) = map.keys().next() {
        return Err(Error::InvalidConfig(format!("unknown config key `{key}`")));
    }
    Ok(())
}

/// Applies teach-time keys onto a [`TrainConfig`], consuming them.
pub fn apply_train_config(cfg: &mut TrainConfig, map: &mut BTreeMap<String, String>) -> Result<()> {
    take(map, "beta", &mut cfg.beta)?;
    take(map, "learning_rate", &mut cfg.learning_rate)?;
    take(map, "batch_size", &mut cfg.batch_size)?;
    take(map, "early_stop_delta", &mut cfg.early_stop_delta)?;
    take(map, "smoothing_window", &mut cfg.smoothing_window)?;
    take(map, "max_steps", &mut cfg.max_steps)?;
    take(map, "seed", &mut cfg.seed)?;
    take(map, "init_token", &mut cfg.init_token)?;
    if let Some(value) = map.remove("variant") {
        cfg.variant = LossVariant::parse(&value)?;
    }
    Ok(())
}

/// Loads a [`TrainConfig`] from an optional file, starting from defaults.
pub fn load_train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = path {
        let mut map = read_kv(path)?;
        apply_train_config(&mut cfg, &mut map)?;
        reject_unknown(&map)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Applies corpus keys (prefix `corpus.`) onto a [`CorpusSpec`].
pub fn apply_corpus_spec(spec: &mut CorpusSpec, map: &mut BTreeMap<String, String>) -> Result<()> {
    take(map, "corpus.n_lines", &mut spec.n_lines)?;
    take(map, "corpus.story_weight", &mut spec.story_weight)?;
    take(map, "corpus.constraint_weight", &mut spec.constraint_weight)?;
    take(map, "corpus.guess_weight", &mut spec.guess_weight)?;
    take(map, "corpus.ordinal_weight", &mut spec.ordinal_weight)?;
    take(map, "corpus.quality_weight", &mut spec.quality_weight)?;
    take(map, "corpus.short_lo", &mut spec.short_lo)?;
    take(map, "corpus.short_hi", &mut spec.short_hi)?;
    take(map, "corpus.refusal_rate", &mut spec.refusal_rate)?;
    take(map, "corpus.heldout", &mut spec.heldout)?;
    Ok(())
}

/// Architecture plus optimisation settings for base-model training.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainSettings {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub context: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Hard cap on optimizer steps.
    pub max_steps: usize,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Stop after this many evaluations without improvement.
    pub patience: usize,
    /// Smallest validation-perplexity drop that counts as improvement.
    pub min_delta: f64,
    /// Fraction of corpus lines held out for validation.
    pub val_fraction: f64,
    pub corpus: CorpusSpec,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        PretrainSettings {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context: 256,
            batch_size: 16,
            learning_rate: 1e-3,
            max_steps: 3000,
            eval_every: 200,
            patience: 3,
            min_delta: 0.01,
            val_fraction: 0.1,
            corpus: CorpusSpec::default(),
        }
    }
}

impl PretrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::InvalidConfig(
                "batch_size, max_steps and eval_every must be positive".to_string(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.patience == 0 {
            return Err(Error::InvalidConfig("patience must be positive".to_string()));
        }
        if !(self.min_delta.is_finite() && self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "min_delta must be non-negative, got {}",
                self.min_delta
            )));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 0.5) {
            return Err(Error::InvalidConfig(format!(
                "val_fraction must be in (0, 0.5), got {}",
                self.val_fraction
            )));
        }
        self.corpus.validate()
    }

    /// Loads settings from an optional file, starting from defaults.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut s = PretrainSettings::default();
        if let Some(path) = path {
            let mut map = read_kv(path)?;
            take(&mut map, "n_layers", &mut s.n_layers)?;
            take(&mut map, "d_model", &mut s.d_model)?;
            take(&mut map, "n_heads", &mut s.n_heads)?;
            take(&mut map, "context", &mut s.context)?;
            take(&mut map, "batch_size", &mut s.batch_size)?;
            take(&mut map, "learning_rate", &mut s.learning_rate)?;
            take(&mut map, "max_steps", &mut s.max_steps)?;
            take(&mut map, "eval_every", &mut s.eval_every)?;
            take(&mut map, "patience", &mut s.patience)?;
            take(&mut map, "min_delta", &mut s.min_delta)?;
            take(&mut map, "val_fraction", &mut s.val_fraction)?;
            apply_corpus_spec(&mut s.corpus, &mut map)?;
            reject_unknown(&map)?;
        }
        s.validate()?;
        Ok(s)
    }
}
