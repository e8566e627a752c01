//! Sampling from a checkpoint: the one-shot `gen` subcommand and the
//! interactive REPL.
//!
//! Both go through [`generate_text`], so a REPL line and a `gen` invocation
//! with the same prompt and seed produce the same response — the REPL adds
//! only line handling and seed bookkeeping on top.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::commands::load_model;
use crate::datasets::derive_seed;
use crate::error::{Error, Result};
use crate::model::{sample, ModelParams, SamplerConfig};
use crate::registry::Registry;
use crate::tokenizer::{encode_prompt, Vocabulary};

/// Default generation budget per response, in tokens.
pub const DEFAULT_MAX_NEW_TOKENS: usize = 64;

/// A checkpoint (plus any registry words) opened for sampling.
pub struct GenSession {
    pub vocab: Vocabulary,
    pub params: ModelParams<f32>,
    pub temperature: f64,
    pub max_new_tokens: usize,
}

impl GenSession {
    /// Opens a checkpoint for generation. With a registry path, every taught
    /// word is attached, so prompts may use taught surfaces; without one the
    /// session speaks the base vocabulary only.
    pub fn load(checkpoint: &Path, registry_path: Option<&Path>) -> Result<Self> {
        let loaded = load_model(checkpoint)?;
        let (vocab, params) = match registry_path {
            Some(path) => {
                let registry = Registry::load_or_default(path)?;
                let (vocab, params, _) = registry.attach_all(&loaded.vocab, &loaded.params)?;
                (vocab, params)
            }
            None => (loaded.vocab, loaded.params),
        };
        Ok(GenSession {
            vocab,
            params,
            temperature: 1.0,
            max_new_tokens: DEFAULT_MAX_NEW_TOKENS,
        })
    }
}

/// Samples one response to `prompt_text` under `seed` and decodes it.
pub fn generate_text(session: &GenSession, prompt_text: &str, seed: u64) -> Result<String> {
    let prompt = encode_prompt(&session.vocab, prompt_text)?;
    let cfg = SamplerConfig {
        temperature: session.temperature,
        max_new_tokens: session.max_new_tokens,
        seed,
    };
    let out = sample(&session.params, &prompt, &cfg)?;
    session.vocab.decode(&out)
}

/// The `gen` subcommand: open, sample once, return the text.
pub fn cmd_gen(
    checkpoint: &Path,
    registry_path: Option<&Path>,
    prompt: &str,
    seed: u64,
    max_new_tokens: usize,
) -> Result<String> {
    let mut session = GenSession::load(checkpoint, registry_path)?;
    session.max_new_tokens = max_new_tokens;
    generate_text(&session, prompt, seed)
}

/// Words in `text` missing from `vocab`, first occurrence order, deduplicated.
fn unknown_words(vocab: &Vocabulary, text: &str) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        if vocab.id_of(word).is_none() && seen.insert(word) {
            out.push(word.to_string());
        }
    }
    out
}

/// How the REPL seeds each generation: a fixed seed repeats responses
/// exactly; counter mode derives a fresh stream per generation.
enum SeedMode {
    Fixed(u64),
    Counter(u64),
}

/// Runs the interactive loop over arbitrary line-based I/O.
///
/// Commands start with a colon — `:seed N` pins the sampling seed (the same
/// prompt then reproduces the same response until the next `:seed`), `:quit`
/// leaves. Any other line is a prompt; words outside the vocabulary are
/// listed back instead of sampled, and the loop continues. Ends on `:quit`
/// or end of input.
pub fn run_repl<R: BufRead, W: Write>(
    mut input: R,
    output: &mut W,
    session: &GenSession,
    start_seed: u64,
) -> Result<()> {
    let io_err = |e: std::io::Error| Error::io("<repl>", e);
    writeln!(
        output,
        "neolog repl: type a prompt, `:seed N` to fix the sampling seed, `:quit` to leave"
    )
    .map_err(io_err)?;
    let mut mode = SeedMode::Counter(start_seed);
    let mut n_generated: u64 = 0;
    let mut line = String::new();
    loop {
        write!(output, "> ").map_err(io_err)?;
        output.flush().map_err(io_err)?;
        line.clear();
        if input.read_line(&mut line).map_err(io_err)? == 0 {
            writeln!(output).map_err(io_err)?;
            return Ok(());
        }
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if text == ":quit" {
            return Ok(());
        }
        if let Some(rest) = text.strip_prefix(":seed") {
            match rest.trim().parse::<u64>() {
                Ok(n) => {
                    mode = SeedMode::Fixed(n);
                    writeln!(output, "seed fixed to {n}").map_err(io_err)?;
                }
                Err(_) => writeln!(output, "usage: :seed N").map_err(io_err)?,
            }
            continue;
        }
        if text.starts_with(':') {
            writeln!(
                output,
                "unknown command `{text}`; known commands: :seed N, :quit"
            )
            .map_err(io_err)?;
            continue;
        }
        let missing = unknown_words(&session.vocab, text);
        if !missing.is_empty() {
            writeln!(output, "unknown words: {}", missing.join(", ")).map_err(io_err)?;
            continue;
        }
        let seed = match mode {
            SeedMode::Fixed(s) => s,
            SeedMode::Counter(s) => derive_seed(s, n_generated, 0x5EB1),
        };
        n_generated += 1;
        match generate_text(session, text, seed) {
            Ok(response) => writeln!(output, "{response}").map_err(io_err)?,
            Err(e) => writeln!(output, "error: {e}").map_err(io_err)?,
        }
    }
}
