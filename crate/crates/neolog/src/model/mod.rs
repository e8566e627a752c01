//! Decoder-only transformer with an input-extensible vocabulary.
//!
//! The architecture is deliberately tiny and fixed: pre-norm blocks, learned
//! positional embeddings, fused QKV projection, GELU MLP. One asymmetry is
//! load-bearing for the whole crate: the embedding table covers the extended
//! vocabulary `|V'|` (base words plus neologisms), while the output projection
//! covers only the base vocabulary. A neologism can therefore appear in a
//! prompt but can never be produced — its output probability is structurally
//! zero rather than merely trained down.
//!
//! Parameters are generic over [`Real`] so the same code runs in `f32`
//! (training, checkpoints) and `f64` (gradient checking, tight numeric
//! oracles).

mod backward;
mod checkpoint;
mod forward;
mod sample;

pub use backward::{
    backward, embedding_row_grad, scatter_input_grads, BackwardScope, LayerGrads, ParamGrads,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    forward_cached, log_softmax, next_token_logits, next_token_probs, sequence_logprob,
    ForwardCache,
};
pub use sample::{greedy_decode, sample, SamplerConfig};

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Weight initialisation scale, also used for fresh neologism rows.
pub const INIT_STD: f64 = 0.02;
/// LayerNorm variance floor.
pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters plus the vocabulary split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Transformer block count.
    pub n_layers: usize,
    /// Residual stream width.
    pub d_model: usize,
    /// Attention head count; must divide `d_model`.
    pub n_heads: usize,
    /// Maximum sequence length.
    pub context: usize,
    /// Extended vocabulary size `|V'|` (embedding row count).
    pub vocab_size: usize,
    /// Base vocabulary size (output projection width).
    pub base_size: usize,
}

impl ModelConfig {
    /// The default desk-scale architecture: 4 layers, width 128, 4 heads,
    /// context 256.
    pub fn default_arch(base_size: usize) -> Self {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            context: 256,
            vocab_size: base_size,
            base_size,
        }
    }

    /// MLP hidden width (fixed 4x expansion).
    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.context == 0
            || self.base_size == 0
        {
            return Err(Error::InvalidConfig(
                "model dimensions must be nonzero".to_string(),
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < self.base_size {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} smaller than base_size {}",
                self.vocab_size, self.base_size
            )));
        }
        Ok(())
    }
}

/// One pre-norm transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_gamma: Array1<S>,
    pub ln1_beta: Array1<S>,
    /// Fused query/key/value projection, `d x 3d`.
    pub w_qkv: Array2<S>,
    pub b_qkv: Array1<S>,
    /// Attention output projection, `d x d`.
    pub w_o: Array2<S>,
    pub b_o: Array1<S>,
    pub ln2_gamma: Array1<S>,
    pub ln2_beta: Array1<S>,
    /// MLP expansion, `d x 4d`.
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    /// MLP contraction, `4d x d`.
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

/// Full parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<S> {
    pub config: ModelConfig,
    /// Token embeddings, `|V'| x d`. Rows past `base_size` are neologisms.
    pub embedding: Array2<S>,
    /// Learned positional embeddings, `context x d`.
    pub positional: Array2<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_gamma: Array1<S>,
    pub lnf_beta: Array1<S>,
    /// Output projection, `d x base_size` — never widened by neologisms.
    pub w_out: Array2<S>,
    pub b_out: Array1<S>,
}

impl<S: Real> ModelParams<S> {
    /// All-zero parameters. Zero logits make every next-token distribution
    /// exactly uniform over the base vocabulary, a useful analytic fixture.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let layer = |_: usize| LayerParams {
            ln1_gamma: Array1::zeros(d),
            ln1_beta: Array1::zeros(d),
            w_qkv: Array2::zeros((d, 3 * d)),
            b_qkv: Array1::zeros(3 * d),
            w_o: Array2::zeros((d, d)),
            b_o: Array1::zeros(d),
            ln2_gamma: Array1::zeros(d),
            ln2_beta: Array1::zeros(d),
            w1: Array2::zeros((d, config.d_ff())),
            b1: Array1::zeros(config.d_ff()),
            w2: Array2::zeros((config.d_ff(), d)),
            b2: Array1::zeros(d),
        };
        Ok(ModelParams {
            embedding: Array2::zeros((config.vocab_size, d)),
            positional: Array2::zeros((config.context, d)),
            layers: (0..config.n_layers).map(layer).collect(),
            lnf_gamma: Array1::zeros(d),
            lnf_beta: Array1::zeros(d),
            w_out: Array2::zeros((d, config.base_size)),
            b_out: Array1::zeros(config.base_size),
            config,
        })
    }

    /// Seeded random initialisation: weights and embeddings from
    /// `N(0, INIT_STD^2)`, biases zero, LayerNorm gains one. Tensors are
    /// filled in a fixed documented order (embedding, positional, then per
    /// layer qkv/out/mlp weights), so identical seeds give identical models.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut fill = |arr: &mut Array2<S>| {
            for v in arr.iter_mut() {
                *v = S::from_f64(normal.sample(&mut rng));
            }
        };
        fill(&mut params.embedding);
        fill(&mut params.positional);
        for layer in &mut params.layers {
            fill(&mut layer.w_qkv);
            fill(&mut layer.w_o);
            fill(&mut layer.w1);
            fill(&mut layer.w2);
            layer.ln1_gamma.fill(S::one());
            layer.ln2_gamma.fill(S::one());
        }
        fill(&mut params.w_out);
        params.lnf_gamma.fill(S::one());
        Ok(params)
    }

    /// Deep copy used as the frozen reference model before training.
    pub fn snapshot(&self) -> Self {
        self.clone()
    }

    /// Appends one embedding row for a freshly registered neologism and
    /// returns its token id. Only the embedding table and `vocab_size` grow;
    /// the output projection is untouched, which is what keeps the new id
    /// unproducible.
    pub fn attach_embedding_row(&mut self, row: &[S]) -> Result<u32> {
        if row.len() != self.config.d_model {
            return Err(Error::InvalidConfig(format!(
                "embedding row has {} entries, model width is {}",
                row.len(),
                self.config.d_model
            )));
        }
        let id = self.config.vocab_size as u32;
        let mut grown = Array2::zeros((self.config.vocab_size + 1, self.config.d_model));
        grown
            .slice_mut(ndarray::s![..self.config.vocab_size, ..])
            .assign(&self.embedding);
        grown
            .row_mut(self.config.vocab_size)
            .assign(&ArrayView1::from(row));
        self.embedding = grown;
        self.config.vocab_size += 1;
        Ok(id)
    }

    pub fn embedding_row(&self, id: u32) -> Result<ArrayView1<'_, S>> {
        if (id as usize) < self.config.vocab_size {
            Ok(self.embedding.row(id as usize))
        } else {
            Err(Error::UnknownId(id))
        }
    }

    pub fn set_embedding_row(&mut self, id: u32, row: &[S]) -> Result<()> {
        if (id as usize) >= self.config.vocab_size {
            return Err(Error::UnknownId(id));
        }
        if row.len() != self.config.d_model {
            return Err(Error::InvalidConfig(format!(
                "embedding row has {} entries, model width is {}",
                row.len(),
                self.config.d_model
            )));
        }
        self.embedding.row_mut(id as usize).assign(&ArrayView1::from(row));
        Ok(())
    }

    /// Largest absolute difference across every tensor except the one
    /// embedding row `skip_row`. Training a single neologism must leave this
    /// at exactly zero.
    pub fn max_abs_diff_excluding_row(&self, other: &Self, skip_row: u32) -> f64 {
        let mut max = 0.0f64;
        let mut track = |a: &S, b: &S| {
            let d = (a.as_f64() - b.as_f64()).abs();
            if d > max {
                max = d;
            }
        };
        for (i, (ra, rb)) in self
            .embedding
            .outer_iter()
            .zip(other.embedding.outer_iter())
            .enumerate()
        {
            if i as u32 == skip_row {
                continue;
            }
            for (a, b) in ra.iter().zip(rb.iter()) {
                track(a, b);
            }
        }
        for (a, b) in self.positional.iter().zip(other.positional.iter()) {
            track(a, b);
        }
        for (la, lb) in self.layers.iter().zip(other.layers.iter()) {
            for (a, b) in la.ln1_gamma.iter().zip(lb.ln1_gamma.iter()) {
                track(a, b);
            }
            for (a, b) in la.ln1_beta.iter().zip(lb.ln1_beta.iter()) {
                track(a, b);
            }
            for (a, b) in la.w_qkv.iter().zip(lb.w_qkv.iter()) {
                track(a, b);
            }
            for (a, b) in la.b_qkv.iter().zip(lb.b_qkv.iter()) {
                track(a, b);
            }
            for (a, b) in la.w_o.iter().zip(lb.w_o.iter()) {
                track(a, b);
            }
            for (a, b) in la.b_o.iter().zip(lb.b_o.iter()) {
                track(a, b);
            }
            for (a, b) in la.ln2_gamma.iter().zip(lb.ln2_gamma.iter()) {
                track(a, b);
            }
            for (a, b) in la.ln2_beta.iter().zip(lb.ln2_beta.iter()) {
                track(a, b);
            }
            for (a, b) in la.w1.iter().zip(lb.w1.iter()) {
                track(a, b);
            }
            for (a, b) in la.b1.iter().zip(lb.b1.iter()) {
                track(a, b);
            }
            for (a, b) in la.w2.iter().zip(lb.w2.iter()) {
                track(a, b);
            }
            for (a, b) in la.b2.iter().zip(lb.b2.iter()) {
                track(a, b);
            }
        }
        for (a, b) in self.lnf_gamma.iter().zip(other.lnf_gamma.iter()) {
            track(a, b);
        }
        for (a, b) in self.lnf_beta.iter().zip(other.lnf_beta.iter()) {
            track(a, b);
        }
        for (a, b) in self.w_out.iter().zip(other.w_out.iter()) {
            track(a, b);
        }
        for (a, b) in self.b_out.iter().zip(other.b_out.iter()) {
            track(a, b);
        }
        max
    }

    /// Converts every tensor to another scalar type through `f64`.
    pub fn cast<T: Real>(&self) -> ModelParams<T> {
        let conv1 = |a: &Array1<S>| a.mapv(|v| T::from_f64(v.as_f64()));
        let conv2 = |a: &Array2<S>| a.mapv(|v| T::from_f64(v.as_f64()));
        ModelParams {
            config: self.config,
            embedding: conv2(&self.embedding),
            positional: conv2(&self.positional),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gamma: conv1(&l.ln1_gamma),
                    ln1_beta: conv1(&l.ln1_beta),
                    w_qkv: conv2(&l.w_qkv),
                    b_qkv: conv1(&l.b_qkv),
                    w_o: conv2(&l.w_o),
                    b_o: conv1(&l.b_o),
                    ln2_gamma: conv1(&l.ln2_gamma),
                    ln2_beta: conv1(&l.ln2_beta),
                    w1: conv2(&l.w1),
                    b1: conv1(&l.b1),
                    w2: conv2(&l.w2),
                    b2: conv1(&l.b2),
                })
                .collect(),
            lnf_gamma: conv1(&self.lnf_gamma),
            lnf_beta: conv1(&self.lnf_beta),
            w_out: conv2(&self.w_out),
            b_out: conv1(&self.b_out),
        }
    }

    /// Total scalar count, embeddings included.
    pub fn param_count(&self) -> usize {
        let mut n = self.embedding.len() + self.positional.len();
        for l in &self.layers {
            n += l.ln1_gamma.len()
                + l.ln1_beta.len()
                + l.w_qkv.len()
                + l.b_qkv.len()
                + l.w_o.len()
                + l.b_o.len()
                + l.ln2_gamma.len()
                + l.ln2_beta.len()
                + l.w1.len()
                + l.b1.len()
                + l.w2.len()
                + l.b2.len();
        }
        n + self.lnf_gamma.len() + self.lnf_beta.len() + self.w_out.len() + self.b_out.len()
    }
}

/// Random embedding row drawn from the initialisation distribution.
pub fn random_embedding_row<S: Real>(d_model: usize, seed: u64) -> Vec<S> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    (0..d_model)
        .map(|_| S::from_f64(normal.sample(&mut rng)))
        .collect()
}
