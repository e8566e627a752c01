//! Command-line interface for neolog.
//!
//! Argument parsing only; every subcommand body lives in
//! [`neolog::commands`], where integration tests exercise it directly. Exit
//! codes: 0 success, 1 usage or ordinary failure, 2 violated invariant.

use std::path::PathBuf;
use std::process::exit;

use clap::{Parser, Subcommand};

use neolog::commands::{
    cmd_data, cmd_eval, cmd_gen, cmd_pretrain, cmd_teach, exit_code_for, load_train_config,
    resolve_seed, run_repl, seed_override, DataKind, DataOptions, EvalKind, GenSession,
    PretrainSettings, DEFAULT_MAX_NEW_TOKENS, EXIT_OK, EXIT_USAGE,
};
use neolog::error::Result;
use neolog::trainer::StopReason;

#[derive(Parser)]
#[command(
    name = "neolog",
    version,
    about = "Teach frozen language models new words as trainable embeddings"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a base model on the synthetic corpus and write the checkpoint
    /// family (checkpoint, vocabulary, corpus, manifest).
    Pretrain {
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
        /// key=value settings file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Run seed (falls back to NEO_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Teach a new word against a frozen checkpoint and record it in the
    /// registry. The checkpoint file itself is never modified.
    Teach {
        /// Surface form of the word to teach, e.g. `ensure_w`.
        surface: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Registry file to append to (created if missing).
        #[arg(long)]
        registry: PathBuf,
        /// Preference dataset (JSON lines) to train against.
        #[arg(long)]
        dataset: PathBuf,
        /// key=value training configuration file.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the configured seed (falls back to NEO_SEED).
        #[arg(long)]
        seed: Option<u64>,
        /// Training-run record file (defaults next to the registry).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a preference dataset: length, diversity, or quality.
    Data {
        /// Dataset kind: length, diversity, or quality.
        kind: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file to write (JSON lines).
        #[arg(long)]
        out: PathBuf,
        /// Surface the dataset will teach.
        #[arg(long)]
        word: String,
        /// Length bucket label (a or b) for the length kind.
        #[arg(long, default_value = "b")]
        bucket: String,
        /// Cap on instructions used (0 = all training instructions).
        #[arg(long, default_value_t = 0)]
        limit: usize,
        /// Responses sampled per instruction for the quality kind.
        #[arg(long, default_value_t = 7)]
        k: usize,
        /// Run seed (falls back to NEO_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Measure a checkpoint: length, diversity, quality, invariance, or
    /// gradcheck. Certificates exit 2 on failure.
    Eval {
        /// Eval kind: length, diversity, quality, invariance, or gradcheck.
        kind: String,
        /// Checkpoint to measure (not needed for gradcheck).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Registry of taught words.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Taught surface to evaluate (defaults per kind).
        #[arg(long)]
        word: Option<String>,
        /// Run seed (falls back to NEO_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Report file to write (JSON lines), plus sidecars.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sample one response to a prompt.
    Gen {
        /// The prompt, as one shell word (quote it).
        prompt: String,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Registry whose taught words the prompt may use.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Sampling seed (falls back to NEO_SEED, then 0).
        #[arg(long)]
        seed: Option<u64>,
        /// Generation budget in tokens.
        #[arg(long, default_value_t = DEFAULT_MAX_NEW_TOKENS)]
        max_new_tokens: usize,
    },
    /// Interactive prompt loop over a checkpoint.
    Repl {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Registry whose taught words prompts may use.
        #[arg(long)]
        registry: Option<PathBuf>,
        /// Base seed for per-line sampling streams.
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn stop_label(stop: StopReason) -> &'static str {
    match stop {
        StopReason::EarlyStop => "early stop",
        StopReason::MaxSteps => "step cap",
    }
}

fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Pretrain { out, config, seed } => {
            let settings = PretrainSettings::load(config.as_deref())?;
            let seed = resolve_seed(seed)?;
            let summary = cmd_pretrain(&out, &settings, seed)?;
            println!(
                "pretrained {} steps on {} lines ({} held for validation); \
                 validation perplexity {:.3} (best {:.3}, {} tokens); wrote {}",
                summary.steps,
                summary.n_train_lines,
                summary.n_val_lines,
                summary.final_val_perplexity,
                summary.best_val_perplexity,
                summary.vocab_size,
                summary.checkpoint.display(),
            );
            Ok(EXIT_OK)
        }
        Command::Teach {
            surface,
            checkpoint,
            registry,
            dataset,
            config,
            seed,
            out,
        } => {
            let mut cfg = load_train_config(config.as_deref())?;
            if let Some(s) = seed_override(seed)? {
                cfg.seed = s;
            }
            let summary = cmd_teach(
                &checkpoint,
                &registry,
                &dataset,
                &surface,
                &cfg,
                out.as_deref(),
            )?;
            println!(
                "taught `{}` (id {}) in {} steps ({}) over {} pairs; \
                 loss {:.4} -> {:.4}; registry {}",
                summary.surface,
                summary.w_id,
                summary.steps,
                stop_label(summary.stop),
                summary.n_examples,
                summary.first_loss,
                summary.last_loss,
                summary.registry_file.display(),
            );
            Ok(EXIT_OK)
        }
        Command::Data {
            kind,
            checkpoint,
            out,
            word,
            bucket,
            limit,
            k,
            seed,
        } => {
            let kind = DataKind::parse(&kind)?;
            let seed = resolve_seed(seed)?;
            let opts = DataOptions {
                surface: word,
                bucket,
                limit,
                k,
            };
            let summary = cmd_data(kind, &checkpoint, &out, &opts, seed)?;
            println!(
                "wrote {} pairs from {} instructions to {}",
                summary.n_pairs,
                summary.n_instructions,
                summary.dataset_file.display(),
            );
            Ok(EXIT_OK)
        }
        Command::Eval {
            kind,
            checkpoint,
            registry,
            word,
            seed,
            out,
        } => {
            let kind = EvalKind::parse(&kind)?;
            let seed = resolve_seed(seed)?;
            let outcome = cmd_eval(
                kind,
                checkpoint.as_deref(),
                registry.as_deref(),
                word.as_deref(),
                seed,
                out.as_deref(),
            )?;
            println!("{}", outcome.summary);
            if let Some(path) = out {
                println!("report written to {}", path.display());
            }
            Ok(outcome.exit)
        }
        Command::Gen {
            prompt,
            checkpoint,
            registry,
            seed,
            max_new_tokens,
        } => {
            let seed = resolve_seed(seed)?;
            let text = cmd_gen(
                &checkpoint,
                registry.as_deref(),
                &prompt,
                seed,
                max_new_tokens,
            )?;
            println!("{text}");
            Ok(EXIT_OK)
        }
        Command::Repl {
            checkpoint,
            registry,
            seed,
        } => {
            let seed = resolve_seed(seed)?;
            let session = GenSession::load(&checkpoint, registry.as_deref())?;
            let stdin = std::io::stdin();
            let mut stdout = std::io::stdout();
            run_repl(stdin.lock(), &mut stdout, &session, seed)?;
            Ok(EXIT_OK)
        }
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 2 for usage errors by convention; this tool reserves
            // 2 for invariant violations, so remap. Help and version requests
            // print to stdout and succeed.
            let is_help = !e.use_stderr();
            let _ = e.print();
            exit(if is_help { EXIT_OK } else { EXIT_USAGE });
        }
    };
    match run(cli) {
        Ok(code) => exit(code),
        Err(err) => {
            eprintln!("error: {err}");
            exit(exit_code_for(&err));
        }
    }
}
