//! Teaching a word: extend the vocabulary, train one embedding row, record
//! the result in the registry.
//!
//! The checkpoint is an input here, never an output — its bytes are hashed
//! before and after and the command fails if they moved. All mutable state
//! lands in the registry file and the run-record sidecar.

use std::path::{Path, PathBuf};

use crate::commands::load_model;
use crate::commands::pretrain::sibling;
use crate::datasets::{encode_records, load_records};
use crate::error::{Error, Result};
use crate::manifest::{file_sha256, Manifest};
use crate::registry::{Registry, RegistryEntry};
use crate::trainer::{init_neologism_embedding, train_neologism, StopReason, TrainConfig};

/// What a teach run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct TeachSummary {
    pub surface: String,
    pub w_id: u32,
    pub steps: usize,
    pub stop: StopReason,
    pub first_loss: f64,
    pub last_loss: f64,
    pub n_examples: usize,
    pub registry_file: PathBuf,
    pub run_record_file: PathBuf,
    pub manifest_file: PathBuf,
    pub checkpoint_hash: String,
}

/// Trains `surface` against the preference dataset and appends it to the
/// registry. Writes `<registry>.<surface>.train.json` (the full run record)
/// unless `run_out` overrides the location.
pub fn cmd_teach(
    checkpoint: &Path,
    registry_path: &Path,
    dataset: &Path,
    surface: &str,
    cfg: &TrainConfig,
    run_out: Option<&Path>,
) -> Result<TeachSummary> {
    cfg.validate()?;
    let hash_before = file_sha256(checkpoint)?;
    let loaded = load_model(checkpoint)?;
    let mut registry = Registry::load_or_default(registry_path)?;
    if registry.contains(surface) {
        return Err(Error::DuplicateSurface(surface.to_string()));
    }

    // Vocabulary extension rejects base-word collisions; the embedding grows
    // by exactly one zero row, which initialisation then fills.
    let (vocab, w_id) = loaded.vocab.add_neologism(surface)?;
    let mut params = loaded.params;
    let attached = params.attach_embedding_row(&vec![0.0; params.config.d_model])?;
    debug_assert_eq!(attached, w_id);
    init_neologism_embedding(&mut params, &vocab, w_id, cfg)?;
    let reference = params.snapshot();

    let records = load_records(dataset)?;
    let examples = encode_records(&records, &vocab, w_id)?;
    let record = train_neologism(&mut params, &reference, w_id, &examples, cfg)?;

    let entry = RegistryEntry {
        vector: params.embedding_row(w_id)?.to_vec(),
        init_token: cfg.init_token.clone(),
        config_hash: cfg.content_hash(),
        checkpoint_hash: hash_before.clone(),
    };
    registry.insert(surface, entry)?;
    registry.save(registry_path)?;

    let run_record_file = match run_out {
        Some(p) => p.to_path_buf(),
        None => sibling(registry_path, &format!(".{surface}.train.json")),
    };
    let json = serde_json::to_string_pretty(&record)?;
    std::fs::write(&run_record_file, json).map_err(|e| Error::io(&run_record_file, e))?;

    let hash_after = file_sha256(checkpoint)?;
    if hash_after != hash_before {
        return Err(Error::Invariant(format!(
            "checkpoint {} changed during teaching",
            checkpoint.display()
        )));
    }

    let mut manifest = Manifest::new("teach", cfg.seed);
    manifest.record_config_json("", &serde_json::to_value(cfg)?);
    manifest.record_config("surface", surface);
    manifest.record_input(checkpoint)?;
    manifest.record_input(dataset)?;
    manifest.record_output(registry_path)?;
    manifest.record_output(&run_record_file)?;
    let manifest_file = manifest.save_for(registry_path)?;

    let first_loss = *record.losses.first().expect("non-empty run");
    let last_loss = *record.losses.last().expect("non-empty run");
    Ok(TeachSummary {
        surface: surface.to_string(),
        w_id,
        steps: record.steps,
        stop: record.stop,
        first_loss,
        last_loss,
        n_examples: examples.len(),
        registry_file: registry_path.to_path_buf(),
        run_record_file,
        manifest_file,
        checkpoint_hash: hash_before,
    })
}
