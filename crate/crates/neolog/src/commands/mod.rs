//! Implementations behind the `neolog` command-line interface.
//!
//! Each subcommand lives in its own module and exposes a `cmd_*` entry point
//! that takes plain arguments, does the work, and returns a summary struct.
//! The binary in `main.rs` is a thin argument-parsing shell around these
//! functions, which keeps every behaviour reachable from integration tests
//! without spawning processes.
//!
//! Shared plumbing lives here: exit-code policy, seed resolution (flag, then
//! the `NEO_SEED` environment variable, then zero), and [`load_model`], which
//! reopens a checkpoint together with the vocabulary file it names.

pub mod config;
pub mod data;
pub mod eval_cmd;
pub mod generate;
pub mod pretrain;
pub mod teach;

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::manifest::file_sha256;
use crate::model::{load_checkpoint, ModelParams};
use crate::tokenizer::Vocabulary;

pub use config::{load_train_config, PretrainSettings};
pub use data::{cmd_data, DataKind, DataOptions, DataSummary};
pub use eval_cmd::{cmd_eval, EvalKind, EvalOutcome};
pub use generate::{cmd_gen, generate_text, run_repl, GenSession, DEFAULT_MAX_NEW_TOKENS};
pub use pretrain::{cmd_pretrain, PretrainSummary};
pub use teach::{cmd_teach, TeachSummary};

/// Process exit code for a successful run.
pub const EXIT_OK: i32 = 0;
/// Process exit code for usage errors and ordinary failures (bad arguments,
/// missing files, malformed inputs).
pub const EXIT_USAGE: i32 = 1;
/// Process exit code reserved for violated runtime invariants, so scripts can
/// distinguish "you called it wrong" from "the model state is wrong".
pub const EXIT_INVARIANT: i32 = 2;

/// Environment variable consulted for a seed when no `--seed` flag is given.
pub const SEED_ENV_VAR: &str = "NEO_SEED";

/// The seed a command was explicitly given: the `--seed` flag first, then
/// the `NEO_SEED` environment variable. `None` means neither spoke, so a
/// config-file value or default applies.
///
/// A set-but-unparsable environment variable is an error rather than a silent
/// fallback, since it almost certainly means a typo in a wrapper script.
pub fn seed_override(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var(SEED_ENV_VAR) {
        Ok(raw) => raw.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::InvalidConfig(format!(
                "{SEED_ENV_VAR} must be an unsigned integer, got {raw:?}"
            ))
        }),
        Err(_) => Ok(None),
    }
}

/// Resolves the seed for a command: explicit flag first, then the
/// `NEO_SEED` environment variable, then zero.
pub fn resolve_seed(flag: Option<u64>) -> Result<u64> {
    Ok(seed_override(flag)?.unwrap_or(0))
}

/// Maps an error to the process exit code the binary should return.
///
/// Invariant violations (including non-finite numerics) get their own code so
/// that automation can treat them as a different severity from usage mistakes.
pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Invariant(_) | Error::NonFinite(_) => EXIT_INVARIANT,
        _ => EXIT_USAGE,
    }
}

/// A checkpoint reopened for use by a command, together with the artifacts
/// every command wants alongside the weights.
#[derive(Debug)]
pub struct LoadedModel {
    /// Deserialized model parameters.
    pub params: ModelParams<f32>,
    /// Vocabulary loaded from the file named inside the checkpoint.
    pub vocab: Vocabulary,
    /// SHA-256 of the checkpoint file as it was on disk when loaded.
    pub checkpoint_hash: String,
    /// Resolved path of the vocabulary file.
    pub vocab_path: PathBuf,
}

/// Loads a checkpoint and the vocabulary file it references.
///
/// The checkpoint stores the vocabulary file's name; a relative name is
/// resolved against the checkpoint's parent directory so the pair can be
/// moved around together.
pub fn load_model(checkpoint: &Path) -> Result<LoadedModel> {
    let checkpoint_hash = file_sha256(checkpoint)?;
    let (params, vocab_name) = load_checkpoint(checkpoint)?;
    let named = PathBuf::from(&vocab_name);
    let vocab_path = if named.is_absolute() {
        named
    } else {
        checkpoint.parent().unwrap_or_else(|| Path::new(".")).join(named)
    };
    let vocab = Vocabulary::load(&vocab_path)?;
    if vocab.len() != params.config.vocab_size || vocab.base_size() != params.config.base_size {
        return Err(Error::InvalidConfig(format!(
            "vocabulary at {} has {} tokens ({} base) but the checkpoint expects {} ({} base)",
            vocab_path.display(),
            vocab.len(),
            vocab.base_size(),
            params.config.vocab_size,
            params.config.base_size,
        )));
    }
    Ok(LoadedModel { params, vocab, checkpoint_hash, vocab_path })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{save_checkpoint, ModelConfig};

    fn tiny_params() -> (ModelParams<f32>, Vocabulary) {
        let vocab = Vocabulary::build("alpha bravo charlie delta").unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context: 16,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        (ModelParams::<f32>::init(config, 7).unwrap(), vocab)
    }

    #[test]
    fn exit_codes_split_invariants_from_usage_errors() {
        assert_eq!(exit_code_for(&Error::Invariant("drift".into())), EXIT_INVARIANT);
        assert_eq!(exit_code_for(&Error::NonFinite("loss")), EXIT_INVARIANT);
        assert_eq!(exit_code_for(&Error::UnknownWord("zzz".into())), EXIT_USAGE);
        assert_eq!(exit_code_for(&Error::InvalidConfig("bad".into())), EXIT_USAGE);
    }

    #[test]
    fn resolve_seed_prefers_explicit_flag() {
        assert_eq!(resolve_seed(Some(42)).unwrap(), 42);
    }

    #[test]
    fn load_model_resolves_vocab_next_to_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let (params, vocab) = tiny_params();
        let ckpt = dir.path().join("model.neo");
        vocab.save(&dir.path().join("model.vocab")).unwrap();
        save_checkpoint(&params, "model.vocab", &ckpt).unwrap();

        let loaded = load_model(&ckpt).unwrap();
        assert_eq!(loaded.vocab.len(), vocab.len());
        assert_eq!(loaded.params.config, params.config);
        assert_eq!(loaded.vocab_path, dir.path().join("model.vocab"));
        assert_eq!(loaded.checkpoint_hash, file_sha256(&ckpt).unwrap());
    }

    #[test]
    fn load_model_rejects_mismatched_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let (params, _) = tiny_params();
        let other = Vocabulary::build("completely different words here now").unwrap();
        let ckpt = dir.path().join("model.neo");
        other.save(&dir.path().join("model.vocab")).unwrap();
        save_checkpoint(&params, "model.vocab", &ckpt).unwrap();

        let err = load_model(&ckpt).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig(_)), "got {err:?}");
    }
}
