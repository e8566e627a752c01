//! Preference-dataset generation.
//!
//! Builds the pair file a teach run consumes. The word being taught is not
//! in the base vocabulary yet, so the command extends a scratch copy of the
//! vocabulary just for encoding; the real extension happens again at teach
//! time and lands on the same id.

use std::path::{Path, PathBuf};

use crate::commands::load_model;
use crate::datasets::{
    build_diversity_pairs, build_length_pairs, build_quality_pairs, instruction_split, save_pairs,
    LengthBucket, RuleScorer, BUCKET_A, BUCKET_B, DEFAULT_HELDOUT, GUESS_INSTRUCTION,
    MAX_CORPUS_ORDINAL,
};
use crate::error::{Error, Result};
use crate::manifest::Manifest;

/// Which pair builder to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Length,
    Diversity,
    Quality,
}

impl DataKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "length" => Ok(DataKind::Length),
            "diversity" => Ok(DataKind::Diversity),
            "quality" => Ok(DataKind::Quality),
            other => Err(Error::InvalidConfig(format!(
                "unknown dataset kind `{other}`; expected length, diversity or quality"
            ))),
        }
    }
}

/// Options for [`cmd_data`].
#[derive(Debug, Clone)]
pub struct DataOptions {
    /// Surface of the word the dataset will teach.
    pub surface: String,
    /// Length bucket label (`a` or `b`) for the length kind.
    pub bucket: String,
    /// Cap on instructions used (0 = all train-side instructions).
    pub limit: usize,
    /// Responses sampled per instruction for the quality kind.
    pub k: usize,
}

impl Default for DataOptions {
    fn default() -> Self {
        DataOptions {
            surface: String::new(),
            bucket: "b".to_string(),
            limit: 0,
            k: 7,
        }
    }
}

fn bucket_by_label(label: &str) -> Result<LengthBucket> {
    match label {
        "a" => Ok(BUCKET_A),
        "b" => Ok(BUCKET_B),
        other => Err(Error::InvalidConfig(format!(
            "unknown bucket `{other}`; expected `a` or `b`"
        ))),
    }
}

/// What a dataset run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DataSummary {
    pub n_pairs: usize,
    pub n_instructions: usize,
    pub dataset_file: PathBuf,
    pub manifest_file: PathBuf,
}

/// Builds a preference-pair file against a checkpoint's vocabulary (and,
/// for the quality kind, its sampled responses).
pub fn cmd_data(
    kind: DataKind,
    checkpoint: &Path,
    out: &Path,
    opts: &DataOptions,
    seed: u64,
) -> Result<DataSummary> {
    if opts.surface.is_empty() {
        return Err(Error::InvalidConfig(
            "dataset generation needs a --word surface".to_string(),
        ));
    }
    let loaded = load_model(checkpoint)?;
    let (vocab, w_id) = loaded.vocab.add_neologism(&opts.surface)?;
    let (train_instructions, _) = instruction_split(DEFAULT_HELDOUT);
    let mut instructions = train_instructions;
    if opts.limit > 0 && opts.limit < instructions.len() {
        instructions.truncate(opts.limit);
    }

    let pairs = match kind {
        DataKind::Length => {
            let bucket = bucket_by_label(&opts.bucket)?;
            build_length_pairs(
                &instructions,
                bucket,
                &vocab,
                w_id,
                loaded.params.config.context,
                seed,
            )?
        }
        DataKind::Diversity => {
            // The diversity game is the guessing instruction, not the story
            // pool; each copy draws an independent answer permutation. Depth
            // caps at the largest ordinal the corpus vocabulary knows.
            let games = vec![GUESS_INSTRUCTION.to_string(); instructions.len()];
            build_diversity_pairs(&games, &vocab, w_id, MAX_CORPUS_ORDINAL, seed)?
        }
        DataKind::Quality => build_quality_pairs(
            &instructions,
            &loaded.params,
            &vocab,
            &RuleScorer::default(),
            opts.k,
            w_id,
            seed,
        )?,
    };
    if pairs.is_empty() {
        return Err(Error::InvalidConfig(
            "no pairs were generated; nothing to save".to_string(),
        ));
    }
    save_pairs(out, &pairs, &vocab)?;

    let mut manifest = Manifest::new("data", seed);
    manifest.record_config("kind", format!("{kind:?}").to_lowercase());
    manifest.record_config("surface", &opts.surface);
    manifest.record_config("bucket", &opts.bucket);
    manifest.record_config("limit", opts.limit);
    manifest.record_config("k", opts.k);
    manifest.record_input(checkpoint)?;
    manifest.record_output(out)?;
    let manifest_file = manifest.save_for(out)?;

    Ok(DataSummary {
        n_pairs: pairs.len(),
        n_instructions: instructions.len(),
        dataset_file: out.to_path_buf(),
        manifest_file,
    })
}
