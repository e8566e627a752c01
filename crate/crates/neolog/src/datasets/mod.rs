//! Preference datasets and the synthetic corpus behind them.
//!
//! The corpus generator ([`gen_pretraining_corpus`]) produces the text the
//! base model is trained on; the three pair builders ([`build_length_pairs`],
//! [`build_diversity_pairs`], [`build_quality_pairs`]) construct the
//! preference data a neologism embedding is trained against. All builders
//! are pure functions of their inputs and a seed.
//!
//! On disk, preference datasets are line-delimited JSON records holding raw
//! text — not token ids — so files remain valid across vocabulary rebuilds.

mod corpus;
mod pairs;

pub use corpus::{
    biased_guess_probs, constraint_sentence, gen_pretraining_corpus, guess_response,
    instruction_split, ordinal_prefix, quality_sentence, CorpusSpec, BIASED_PREFIX_WORD,
    CONSTRAINT_RANGES, DEFAULT_HELDOUT, DIVERSE_PREFIX_WORD, GUESS_INSTRUCTION,
    IGNORED_CONSTRAINT_WORD, MAX_CORPUS_ORDINAL, NOUNS, OBEYED_CONSTRAINT_WORD, ORDINALS,
    QUALITY_WORD, REFUSAL_MARKER, REFUSAL_RESPONSE, TEMPLATES,
};
pub(crate) use corpus::derive_seed;
pub use pairs::{build_diversity_pairs, build_length_pairs, build_quality_pairs};

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::{
    encode_prompt, encode_response, word_count, TokenSeq, Vocabulary, BOS_ID, EOS_ID,
};

/// The verbatim response-scoring prompt for plugging a real language model in
/// as a [`Scorer`]; the two `{}` slots take the instruction and the response.
pub const SCORING_PROMPT_TEMPLATE: &str = include_str!("../../assets/scoring_prompt.txt");

/// One token-level preference pair: a prompt that carries the neologism being
/// taught, the response to prefer, and the response to disfavor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceExample {
    pub prompt: TokenSeq,
    pub chosen: TokenSeq,
    pub rejected: TokenSeq,
    /// Experiment label carried through to records and reports.
    pub tag: String,
}

impl PreferenceExample {
    /// Validating constructor: the prompt must contain `w_id` exactly once
    /// and no other neologism; the responses must be base-vocabulary only and
    /// distinct.
    pub fn checked(
        prompt: TokenSeq,
        chosen: TokenSeq,
        rejected: TokenSeq,
        tag: impl Into<String>,
        w_id: u32,
        vocab: &Vocabulary,
    ) -> Result<Self> {
        let count = prompt.iter().filter(|&id| id == w_id).count();
        if count != 1 {
            return Err(Error::NeologismCount { id: w_id, count });
        }
        if let Some(other) = prompt.iter().find(|&id| vocab.is_neologism(id) && id != w_id) {
            return Err(Error::NeologismCount {
                id: other,
                count: 1,
            });
        }
        for response in [&chosen, &rejected] {
            if let Some(id) = response.iter().find(|&id| vocab.is_neologism(id)) {
                return Err(Error::NeologismInResponse(id));
            }
        }
        if chosen == rejected {
            return Err(Error::DegeneratePair);
        }
        Ok(PreferenceExample {
            prompt,
            chosen,
            rejected,
            tag: tag.into(),
        })
    }

    /// Decodes back to a raw-text record. The byte inverse of
    /// [`encode_record`] for text produced by this crate's builders.
    pub fn to_record(&self, vocab: &Vocabulary) -> Result<PreferenceRecord> {
        let strip_bos = |seq: &TokenSeq| -> TokenSeq {
            match seq.ids() {
                [BOS_ID, rest @ ..] => TokenSeq::new(rest.to_vec()),
                _ => seq.clone(),
            }
        };
        let strip_eos = |seq: &TokenSeq| -> TokenSeq {
            match seq.ids() {
                [rest @ .., EOS_ID] => TokenSeq::new(rest.to_vec()),
                _ => seq.clone(),
            }
        };
        Ok(PreferenceRecord {
            prompt: vocab.decode(&strip_bos(&self.prompt))?,
            chosen: vocab.decode(&strip_eos(&self.chosen))?,
            rejected: vocab.decode(&strip_eos(&self.rejected))?,
            tag: self.tag.clone(),
        })
    }
}

/// The on-disk form of a preference pair: raw text plus the experiment tag.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferenceRecord {
    pub prompt: String,
    pub chosen: String,
    pub rejected: String,
    pub tag: String,
}

/// Tokenizes a record against `vocab`, restoring control tokens and
/// re-checking every pair invariant — degenerate or malformed records are
/// rejected at load time, before any training step can see them.
pub fn encode_record(
    record: &PreferenceRecord,
    vocab: &Vocabulary,
    w_id: u32,
) -> Result<PreferenceExample> {
    PreferenceExample::checked(
        encode_prompt(vocab, &record.prompt)?,
        encode_response(vocab, &record.chosen)?,
        encode_response(vocab, &record.rejected)?,
        record.tag.clone(),
        w_id,
        vocab,
    )
}

pub fn encode_records(
    records: &[PreferenceRecord],
    vocab: &Vocabulary,
    w_id: u32,
) -> Result<Vec<PreferenceExample>> {
    records
        .iter()
        .map(|r| encode_record(r, vocab, w_id))
        .collect()
}

/// Writes pairs as line-delimited JSON records.
pub fn save_pairs(path: &Path, pairs: &[PreferenceExample], vocab: &Vocabulary) -> Result<()> {
    let mut out = Vec::new();
    for pair in pairs {
        let record = pair.to_record(vocab)?;
        serde_json::to_writer(&mut out, &record)?;
        out.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads line-delimited records; malformed lines are reported with their
/// line number.
pub fn load_records(path: &Path) -> Result<Vec<PreferenceRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PreferenceRecord = serde_json::from_str(&line)
            .map_err(|e| Error::malformed(path, format!("line {}: {e}", i + 1)))?;
        records.push(record);
    }
    Ok(records)
}

/// An inclusive word-count window a response must land in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub lo: usize,
    pub hi: usize,
}

/// The two shipped buckets: A sits just above the base model's short prior,
/// B well above it.
pub const BUCKET_A: LengthBucket = LengthBucket { lo: 20, hi: 30 };
pub const BUCKET_B: LengthBucket = LengthBucket { lo: 40, hi: 60 };

impl LengthBucket {
    /// `context_words` is the model's context budget in words.
    pub fn validate(&self, context_words: usize) -> Result<()> {
        if self.lo == 0 || self.lo >= self.hi || self.hi > context_words {
            return Err(Error::InvalidConfig(format!(
                "length bucket {}-{} invalid for a {context_words}-word budget",
                self.lo, self.hi
            )));
        }
        Ok(())
    }

    pub fn contains(&self, words: usize) -> bool {
        (self.lo..=self.hi).contains(&words)
    }

    pub fn label(&self) -> String {
        format!("{}-{}", self.lo, self.hi)
    }
}

/// A deterministic, total response-scoring function on the 1..=5 scale.
pub trait Scorer {
    fn score(&self, prompt: &str, response: &str) -> u8;
}

/// The shipped rule-based scorer: a response carrying the refusal marker
/// scores 1; otherwise the score grows with word variety, from 2 up to 5.
#[derive(Debug, Clone)]
pub struct RuleScorer {
    pub refusal_marker: String,
}

impl Default for RuleScorer {
    fn default() -> Self {
        RuleScorer {
            refusal_marker: REFUSAL_MARKER.to_string(),
        }
    }
}

impl Scorer for RuleScorer {
    fn score(&self, _prompt: &str, response: &str) -> u8 {
        if response
            .split_whitespace()
            .any(|w| w == self.refusal_marker)
        {
            return 1;
        }
        let distinct = response.split_whitespace().collect::<BTreeSet<_>>().len();
        let score = 2 + (distinct / 10).min(3);
        (score as u8).clamp(1, 5)
    }
}

/// Mean score over sampled responses; a convenience shared by quality-pair
/// construction and evaluation.
pub fn mean_score(scorer: &dyn Scorer, prompt: &str, responses: &[String]) -> f64 {
    let total: u32 = responses
        .iter()
        .map(|r| u32::from(scorer.score(prompt, r)))
        .sum();
    total as f64 / responses.len() as f64
}

/// Word-count helper re-exported for bucket checks on raw responses.
pub fn response_words(text: &str) -> usize {
    word_count(text)
}
