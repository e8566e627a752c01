//! Word-level tokenizer over a closed synthetic alphabet.
//!
//! Tokens are whitespace-delimited words. Three control tokens (`<bos>`,
//! `<eos>`, `<pad>`) occupy ids 0..3, followed by corpus words in first
//! occurrence order. New words ("neologisms") are appended after the base
//! vocabulary and must contain at least one character outside the corpus
//! alphabet, so no naturalistic text can ever encode to a neologism id.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_ID: u32 = 0;
pub const EOS_ID: u32 = 1;
pub const PAD_ID: u32 = 2;

pub const BOS_SURFACE: &str = "<bos>";
pub const EOS_SURFACE: &str = "<eos>";
pub const PAD_SURFACE: &str = "<pad>";

const NEOLOGISM_MARKER: &str = "#neologism ";

/// A sequence of token ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default)]
pub struct TokenSeq {
    ids: Vec<u32>,
}

impl TokenSeq {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn push(&mut self, id: u32) {
        self.ids.push(id);
    }

    /// New sequence `self ⊕ other`.
    pub fn concat(&self, other: &TokenSeq) -> TokenSeq {
        let mut ids = self.ids.clone();
        ids.extend_from_slice(&other.ids);
        TokenSeq { ids }
    }

    pub fn iter(&self) -> impl Iterator<Item = u32> + '_ {
        self.ids.iter().copied()
    }
}

impl From<Vec<u32>> for TokenSeq {
    fn from(ids: Vec<u32>) -> Self {
        TokenSeq { ids }
    }
}

/// Base token inventory plus registered neologism tokens.
///
/// Immutable after construction: [`Vocabulary::add_neologism`] returns a new
/// value, so a vocabulary can be shared read-only across workers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    base_size: usize,
    neologism_ids: BTreeSet<u32>,
    /// Characters occurring in base (non-control) tokens.
    alphabet: BTreeSet<char>,
}

impl Vocabulary {
    /// Builds the base vocabulary from whitespace-separable corpus text.
    ///
    /// Ids are dense: control tokens first, then distinct corpus words in
    /// first-occurrence order. Deterministic for identical input.
    pub fn build(corpus: &str) -> Result<Self> {
        if corpus.split_whitespace().next().is_none() {
            return Err(Error::EmptyCorpus);
        }
        let mut tokens: Vec<String> = vec![
            BOS_SURFACE.to_string(),
            EOS_SURFACE.to_string(),
            PAD_SURFACE.to_string(),
        ];
        let mut index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        let mut alphabet = BTreeSet::new();
        for word in corpus.split_whitespace() {
            if !index.contains_key(word) {
                index.insert(word.to_string(), tokens.len() as u32);
                tokens.push(word.to_string());
            }
            alphabet.extend(word.chars());
        }
        Ok(Vocabulary {
            base_size: tokens.len(),
            tokens,
            index,
            neologism_ids: BTreeSet::new(),
            alphabet,
        })
    }

    /// Registers a new word, returning the extended vocabulary and its id.
    ///
    /// The surface must contain at least one character outside the corpus
    /// alphabet; this makes absence-from-corpus structural rather than a
    /// convention.
    pub fn add_neologism(&self, surface: &str) -> Result<(Vocabulary, u32)> {
        if surface.split_whitespace().count() != 1 {
            return Err(Error::InvalidConfig(format!(
                "neologism surface {surface:?} must be a single word"
            )));
        }
        if self.index.contains_key(surface) {
            return Err(Error::DuplicateSurface(surface.to_string()));
        }
        if surface.chars().all(|c| self.alphabet.contains(&c)) {
            return Err(Error::SurfaceNotNovel(surface.to_string()));
        }
        let mut next = self.clone();
        let id = next.tokens.len() as u32;
        next.index.insert(surface.to_string(), id);
        next.tokens.push(surface.to_string());
        next.neologism_ids.insert(id);
        Ok((next, id))
    }

    /// Encodes whitespace-separated text. Empty text gives an empty sequence.
    pub fn encode(&self, text: &str) -> Result<TokenSeq> {
        let mut ids = Vec::new();
        for word in text.split_whitespace() {
            match self.index.get(word) {
                Some(&id) => ids.push(id),
                None => return Err(Error::UnknownWord(word.to_string())),
            }
        }
        Ok(TokenSeq::new(ids))
    }

    /// Decodes to single-space-joined surfaces.
    pub fn decode(&self, seq: &TokenSeq) -> Result<String> {
        let mut words = Vec::with_capacity(seq.len());
        for id in seq.iter() {
            words.push(self.token(id)?);
        }
        Ok(words.join(" "))
    }

    pub fn token(&self, id: u32) -> Result<&str> {
        self.tokens
            .get(id as usize)
            .map(String::as_str)
            .ok_or(Error::UnknownId(id))
    }

    pub fn id_of(&self, surface: &str) -> Option<u32> {
        self.index.get(surface).copied()
    }

    /// Total size |V'| including neologisms.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds the control tokens
    }

    /// Count of non-neologism tokens (control tokens + corpus words).
    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn neologism_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.neologism_ids.iter().copied()
    }

    pub fn is_neologism(&self, id: u32) -> bool {
        (id as usize) >= self.base_size
    }

    pub fn contains_neologism(&self, seq: &TokenSeq) -> bool {
        seq.iter().any(|id| self.is_neologism(id))
    }

    /// One token per line (line number = id), then a metadata block listing
    /// neologism ids, one `#neologism <id>` line each.
    pub fn to_file_string(&self) -> String {
        let mut out = String::new();
        for token in &self.tokens {
            out.push_str(token);
            out.push('\n');
        }
        for id in &self.neologism_ids {
            out.push_str(NEOLOGISM_MARKER);
            out.push_str(&id.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self> {
        let mut tokens = Vec::new();
        let mut neologism_ids = BTreeSet::new();
        for line in text.lines() {
            if let Some(rest) = line.strip_prefix(NEOLOGISM_MARKER) {
                let id: u32 = rest
                    .trim()
                    .parse()
                    .map_err(|_| Error::malformed("<vocabulary>", format!("bad neologism id {rest:?}")))?;
                neologism_ids.insert(id);
            } else if neologism_ids.is_empty() {
                tokens.push(line.to_string());
            } else {
                return Err(Error::malformed(
                    "<vocabulary>",
                    "token line after neologism metadata block",
                ));
            }
        }
        if tokens.len() < 3
            || tokens[0] != BOS_SURFACE
            || tokens[1] != EOS_SURFACE
            || tokens[2] != PAD_SURFACE
        {
            return Err(Error::malformed(
                "<vocabulary>",
                "missing control token preamble",
            ));
        }
        let base_size = tokens.len() - neologism_ids.len();
        for &id in &neologism_ids {
            if (id as usize) < base_size || (id as usize) >= tokens.len() {
                return Err(Error::malformed(
                    "<vocabulary>",
                    format!("neologism id {id} out of range"),
                ));
            }
        }
        let index: HashMap<String, u32> = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        if index.len() != tokens.len() {
            return Err(Error::malformed("<vocabulary>", "duplicate surface"));
        }
        let alphabet = tokens[3..base_size]
            .iter()
            .flat_map(|t| t.chars())
            .collect();
        Ok(Vocabulary {
            tokens,
            index,
            base_size,
            neologism_ids,
            alphabet,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_file_string())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_file_string(&text).map_err(|e| match e {
            Error::Malformed { reason, .. } => Error::malformed(path.display().to_string(), reason),
            other => other,
        })
    }
}

/// `<bos>` followed by the encoded text: the prefix form every model
/// operation expects.
pub fn encode_prompt(vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
    let mut ids = vec![BOS_ID];
    ids.extend_from_slice(vocab.encode(text)?.ids());
    Ok(TokenSeq::new(ids))
}

/// Encoded text with a trailing `<eos>`: the scored form of a response.
pub fn encode_response(vocab: &Vocabulary, text: &str) -> Result<TokenSeq> {
    let mut ids = vocab.encode(text)?.ids().to_vec();
    ids.push(EOS_ID);
    Ok(TokenSeq::new(ids))
}

/// Whitespace-delimited word count.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}
