//! Neologism embedding learning for a tiny from-scratch language model.
//!
//! The toolkit adds brand-new words ("neologisms") to a frozen autoregressive
//! transformer and trains *only* the new word's embedding row against
//! preference pairs. Because every other tensor stays untouched, prompts that
//! do not use a new word produce bit-identical output to the base model, while
//! prompts that do use it steer generation toward the preferred behaviour.
//!
//! The crate is organised around that pipeline:
//!
//! * [`tokenizer`] — word-level vocabulary over a closed synthetic alphabet,
//!   with structurally enforced vocabulary extension for new words.
//! * [`model`] — the decoder-only transformer: exact sequence log-probabilities,
//!   seeded sampling with new-word masking, checkpoints, reference snapshots.
//! * [`losses`] — pairwise preference losses (DPO and the anchored "up" variant).
//! * [`trainer`] — single-row Adam optimisation with exact reverse-mode
//!   gradients restricted to the new word's embedding.
//! * [`datasets`] — synthetic pretraining corpus and the three preference pair
//!   builders (length control, response diversity, self-scored quality).
//! * [`eval`] — measurement: guess distributions, success curves, length
//!   satisfaction, frozen-model invariance, quality score comparison.
//! * [`commands`] — the CLI surface: pretrain / teach / eval / gen / repl,
//!   each emitting a reproducibility manifest.

pub mod commands;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod losses;
pub mod manifest;
pub mod model;
pub mod registry;
pub mod scalar;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
