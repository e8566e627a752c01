//! The taught-word registry: surfaces mapped to trained embedding rows.
//!
//! Teaching writes here, never into the checkpoint. The base model file
//! stays byte-identical no matter how many words are taught against it, and
//! one checkpoint can back any number of independently trained words. Using
//! a taught word means attaching its row to a fresh copy of the base
//! parameters; the attach point is an id the output projection has no column
//! for, so the usual no-emission guarantee holds automatically.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::tokenizer::Vocabulary;

/// One taught word.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryEntry {
    /// The trained embedding row, model width long.
    pub vector: Vec<f32>,
    /// Surface the row was initialised from, or the random-init sentinel.
    pub init_token: String,
    /// Content hash of the training configuration that produced the row.
    pub config_hash: String,
    /// Content hash of the checkpoint file the row was trained against.
    pub checkpoint_hash: String,
}

/// Surface → entry map, stored as JSON with sorted keys.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Registry {
    entries: BTreeMap<String, RegistryEntry>,
}

impl Registry {
    pub fn new() -> Self {
        Registry::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.entries.contains_key(surface)
    }

    /// Looks a surface up, failing with the missing word's name.
    pub fn get(&self, surface: &str) -> Result<&RegistryEntry> {
        self.entries
            .get(surface)
            .ok_or_else(|| Error::NotInRegistry(surface.to_string()))
    }

    /// Registered surfaces in sorted order.
    pub fn surfaces(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Adds a freshly taught word. A surface can only be taught once per
    /// registry; retraining means choosing a new surface or a new registry.
    pub fn insert(&mut self, surface: &str, entry: RegistryEntry) -> Result<()> {
        if self.contains(surface) {
            return Err(Error::DuplicateSurface(surface.to_string()));
        }
        self.entries.insert(surface.to_string(), entry);
        Ok(())
    }

    /// Extends `vocab` with `surface` and attaches its trained row to a copy
    /// of `base`, returning the extended pair plus the new id.
    pub fn attach(
        &self,
        surface: &str,
        vocab: &Vocabulary,
        base: &ModelParams<f32>,
    ) -> Result<(Vocabulary, ModelParams<f32>, u32)> {
        let entry = self.get(surface)?;
        if entry.vector.len() != base.config.d_model {
            return Err(Error::InvalidConfig(format!(
                "registry row for `{surface}` has width {}, model expects {}",
                entry.vector.len(),
                base.config.d_model
            )));
        }
        let (extended, id) = vocab.add_neologism(surface)?;
        let mut params = base.snapshot();
        let got = params.attach_embedding_row(&entry.vector)?;
        debug_assert_eq!(got, id);
        Ok((extended, params, id))
    }

    /// Attaches every registered word in sorted order, returning the fully
    /// extended vocabulary and model plus each surface's id. Sorted order
    /// makes the id assignment reproducible across runs.
    pub fn attach_all(
        &self,
        vocab: &Vocabulary,
        base: &ModelParams<f32>,
    ) -> Result<(Vocabulary, ModelParams<f32>, BTreeMap<String, u32>)> {
        let mut current_vocab = vocab.clone();
        let mut params = base.snapshot();
        let mut ids = BTreeMap::new();
        for (surface, entry) in &self.entries {
            if entry.vector.len() != params.config.d_model {
                return Err(Error::InvalidConfig(format!(
                    "registry row for `{surface}` has width {}, model expects {}",
                    entry.vector.len(),
                    params.config.d_model
                )));
            }
            let (next, id) = current_vocab.add_neologism(surface)?;
            current_vocab = next;
            let got = params.attach_embedding_row(&entry.vector)?;
            debug_assert_eq!(got, id);
            ids.insert(surface.clone(), id);
        }
        Ok((current_vocab, params, ids))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads a registry, treating a missing file as empty — the state before
    /// any word has been taught.
    pub fn load_or_default(path: &Path) -> Result<Self> {
        if path.exists() {
            Registry::load(path)
        } else {
            Ok(Registry::new())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::invariance_check;
    use crate::model::ModelConfig;
    use crate::tokenizer::encode_prompt;

    fn entry(d: usize, fill: f32) -> RegistryEntry {
        RegistryEntry {
            vector: (0..d).map(|i| fill + i as f32 * 1e-3).collect(),
            init_token: "ensure".to_string(),
            config_hash: "cfg".to_string(),
            checkpoint_hash: "ckpt".to_string(),
        }
    }

    fn base() -> (Vocabulary, ModelParams<f32>) {
        let vocab = Vocabulary::build("tell me a story about the river .").unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context: 32,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        let params = ModelParams::<f32>::init(config, 4).unwrap();
        (vocab, params)
    }

    #[test]
    fn insert_get_and_duplicates() {
        let mut reg = Registry::new();
        assert!(reg.is_empty());
        reg.insert("ensure_w", entry(16, 0.5)).unwrap();
        assert_eq!(reg.len(), 1);
        assert!(reg.contains("ensure_w"));
        assert_eq!(reg.get("ensure_w").unwrap().init_token, "ensure");
        assert!(matches!(
            reg.get("missing_w").unwrap_err(),
            Error::NotInRegistry(w) if w == "missing_w"
        ));
        assert!(matches!(
            reg.insert("ensure_w", entry(16, 0.1)).unwrap_err(),
            Error::DuplicateSurface(_)
        ));
    }

    #[test]
    fn file_round_trip_preserves_rows_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        let mut reg = Registry::new();
        let mut e = entry(16, 0.1);
        // Awkward values: not exactly representable, subnormal, negative zero.
        e.vector[0] = 0.1;
        e.vector[1] = f32::MIN_POSITIVE / 8.0;
        e.vector[2] = -0.0;
        reg.insert("ensure_w", e).unwrap();
        reg.insert("give_w", entry(16, -2.5)).unwrap();
        reg.save(&path).unwrap();
        let back = Registry::load(&path).unwrap();
        assert_eq!(back, reg);
        let (a, b) = (
            &back.get("ensure_w").unwrap().vector,
            &reg.get("ensure_w").unwrap().vector,
        );
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(
            back.surfaces().collect::<Vec<_>>(),
            vec!["ensure_w", "give_w"]
        );
    }

    #[test]
    fn attach_extends_without_disturbing_base_behaviour() {
        let (vocab, params) = base();
        let mut reg = Registry::new();
        reg.insert("ensure_w", entry(16, 0.25)).unwrap();
        let (extended, taught, id) = reg.attach("ensure_w", &vocab, &params).unwrap();
        assert_eq!(extended.id_of("ensure_w"), Some(id));
        assert!(extended.is_neologism(id));
        assert_eq!(taught.config.vocab_size, params.config.vocab_size + 1);
        let row = taught.embedding_row(id).unwrap();
        assert_eq!(row.to_vec(), reg.get("ensure_w").unwrap().vector);

        let prompts = vec![encode_prompt(&vocab, "tell me a story about the river .").unwrap()];
        let cert = invariance_check(&params, &taught, &prompts).unwrap();
        assert!(cert.pass, "attaching a row must not touch base prompts");
    }

    #[test]
    fn attach_all_assigns_sorted_ids() {
        let (vocab, params) = base();
        let mut reg = Registry::new();
        reg.insert("zeta_w", entry(16, 0.3)).unwrap();
        reg.insert("alpha_w", entry(16, 0.1)).unwrap();
        let (extended, taught, ids) = reg.attach_all(&vocab, &params).unwrap();
        let base_size = vocab.base_size() as u32;
        assert_eq!(ids["alpha_w"], base_size);
        assert_eq!(ids["zeta_w"], base_size + 1);
        assert_eq!(extended.len(), vocab.len() + 2);
        assert_eq!(taught.config.vocab_size, params.config.vocab_size + 2);
        assert_eq!(
            taught.embedding_row(ids["alpha_w"]).unwrap().to_vec(),
            reg.get("alpha_w").unwrap().vector
        );
    }

    #[test]
    fn attach_rejects_mismatched_width_and_colliding_surfaces() {
        let (vocab, params) = base();
        let mut reg = Registry::new();
        reg.insert("wide_w", entry(17, 0.1)).unwrap();
        assert!(matches!(
            reg.attach("wide_w", &vocab, &params).unwrap_err(),
            Error::InvalidConfig(_)
        ));
        let mut reg = Registry::new();
        reg.insert("story", entry(16, 0.1)).unwrap();
        assert!(reg.attach("story", &vocab, &params).is_err());
    }

    #[test]
    fn loading_behaviour_around_missing_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("registry.json");
        assert!(matches!(
            Registry::load(&path).unwrap_err(),
            Error::Io { .. }
        ));
        assert!(Registry::load_or_default(&path).unwrap().is_empty());

        std::fs::write(&path, "not json").unwrap();
        assert!(Registry::load(&path).is_err());
    }
}
