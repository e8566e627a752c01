//! Base-model training: synthesize the corpus, build the vocabulary, fit the
//! transformer with cross-entropy, and write the checkpoint family.
//!
//! Every artifact is derived from `(settings, seed)` alone, so rerunning the
//! command reproduces the corpus, the vocabulary, and the checkpoint byte for
//! byte. Validation runs on a deterministic line split; training stops when
//! validation perplexity stops improving or the step cap is hit.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Ix1, Ix2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::commands::config::PretrainSettings;
use crate::datasets::{derive_seed, gen_pretraining_corpus};
use crate::error::{Error, Result};
use crate::manifest::{file_sha256, Manifest};
use crate::model::{
    backward, forward_cached, log_softmax, save_checkpoint, scatter_input_grads, BackwardScope,
    LayerParams, ModelConfig, ModelParams,
};
use crate::tokenizer::{encode_prompt, Vocabulary, EOS_ID, PAD_ID};
use crate::trainer::{AdamHyper, AdamState};

/// One validation measurement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValPoint {
    pub step: usize,
    pub perplexity: f64,
}

/// What a pretraining run produced.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSummary {
    pub steps: usize,
    pub final_val_perplexity: f64,
    pub best_val_perplexity: f64,
    pub evals: Vec<ValPoint>,
    pub n_train_lines: usize,
    pub n_val_lines: usize,
    pub vocab_size: usize,
    pub checkpoint: PathBuf,
    pub vocab_file: PathBuf,
    pub corpus_file: PathBuf,
    pub manifest_file: PathBuf,
    pub checkpoint_hash: String,
}

/// Right-pads sequences of one batch to a common length with [`PAD_ID`].
/// Padding only ever appears as a masked target or a causally-unseen suffix,
/// so it cannot influence any measured position.
fn pad_batch(seqs: &[Vec<u32>]) -> Vec<Vec<u32>> {
    let width = seqs.iter().map(Vec::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| {
            let mut padded = s.clone();
            padded.resize(width, PAD_ID);
            padded
        })
        .collect()
}

/// Token-level negative log-likelihood over one padded batch. Returns the
/// summed NLL, the target count, and — when `want_grad` — the mean-loss
/// logit gradient ready for the backward pass.
fn batch_nll<S: crate::scalar::Real>(
    params: &ModelParams<S>,
    padded: &[Vec<u32>],
    want_grad: bool,
) -> Result<(f64, usize, Option<(Array2<S>, crate::model::ForwardCache<S>)>)> {
    let refs: Vec<&[u32]> = padded.iter().map(|s| s.as_slice()).collect();
    let (logits, cache) = forward_cached(params, &refs)?;
    let t = padded[0].len();
    let base = params.config.base_size;

    let mut total_nll = 0.0_f64;
    let mut n_targets = 0usize;
    let mut d_logits = want_grad.then(|| Array2::<S>::zeros((padded.len() * t, base)));
    for (bi, seq) in padded.iter().enumerate() {
        for ti in 0..t.saturating_sub(1) {
            let target = seq[ti + 1];
            if target == PAD_ID {
                continue;
            }
            let row_idx = bi * t + ti;
            let row = logits.row(row_idx);
            let lsm = log_softmax(row.as_slice().expect("contiguous logits"));
            total_nll -= lsm[target as usize];
            n_targets += 1;
            if let Some(d) = d_logits.as_mut() {
                let mut d_row = d.row_mut(row_idx);
                for (j, &lp) in lsm.iter().enumerate() {
                    d_row[j] = S::from_f64(lp.exp());
                }
                d_row[target as usize] = d_row[target as usize] - S::one();
            }
        }
    }
    if n_targets == 0 {
        return Err(Error::InvalidConfig(
            "batch contains no prediction targets".to_string(),
        ));
    }
    if let Some(d) = d_logits.as_mut() {
        let scale = S::from_f64(1.0 / n_targets as f64);
        d.mapv_inplace(|v| v * scale);
    }
    Ok((total_nll, n_targets, d_logits.map(|d| (d, cache))))
}

/// Corpus-level perplexity: `exp` of the mean per-token NLL.
pub fn perplexity<S: crate::scalar::Real>(
    params: &ModelParams<S>,
    batches: &[Vec<Vec<u32>>],
) -> Result<f64> {
    let mut nll = 0.0_f64;
    let mut count = 0usize;
    for batch in batches {
        let (batch_nll_sum, n, _) = batch_nll(params, batch, false)?;
        nll += batch_nll_sum;
        count += n;
    }
    if count == 0 {
        return Err(Error::InvalidConfig("no validation targets".to_string()));
    }
    Ok((nll / count as f64).exp())
}

struct LayerAdam {
    ln1_gamma: AdamState<f32, Ix1>,
    ln1_beta: AdamState<f32, Ix1>,
    w_qkv: AdamState<f32, Ix2>,
    b_qkv: AdamState<f32, Ix1>,
    w_o: AdamState<f32, Ix2>,
    b_o: AdamState<f32, Ix1>,
    ln2_gamma: AdamState<f32, Ix1>,
    ln2_beta: AdamState<f32, Ix1>,
    w1: AdamState<f32, Ix2>,
    b1: AdamState<f32, Ix1>,
    w2: AdamState<f32, Ix2>,
    b2: AdamState<f32, Ix1>,
}

impl LayerAdam {
    fn new(layer: &LayerParams<f32>) -> Self {
        LayerAdam {
            ln1_gamma: AdamState::zeros_like(&layer.ln1_gamma),
            ln1_beta: AdamState::zeros_like(&layer.ln1_beta),
            w_qkv: AdamState::zeros_like(&layer.w_qkv),
            b_qkv: AdamState::zeros_like(&layer.b_qkv),
            w_o: AdamState::zeros_like(&layer.w_o),
            b_o: AdamState::zeros_like(&layer.b_o),
            ln2_gamma: AdamState::zeros_like(&layer.ln2_gamma),
            ln2_beta: AdamState::zeros_like(&layer.ln2_beta),
            w1: AdamState::zeros_like(&layer.w1),
            b1: AdamState::zeros_like(&layer.b1),
            w2: AdamState::zeros_like(&layer.w2),
            b2: AdamState::zeros_like(&layer.b2),
        }
    }
}

/// Adam state for every tensor in the model, updated in lock-step.
struct PretrainOptimizer {
    embedding: AdamState<f32, Ix2>,
    positional: AdamState<f32, Ix2>,
    layers: Vec<LayerAdam>,
    lnf_gamma: AdamState<f32, Ix1>,
    lnf_beta: AdamState<f32, Ix1>,
    w_out: AdamState<f32, Ix2>,
    b_out: AdamState<f32, Ix1>,
    hyper: AdamHyper,
}

impl PretrainOptimizer {
    fn new(params: &ModelParams<f32>) -> Self {
        PretrainOptimizer {
            embedding: AdamState::zeros_like(&params.embedding),
            positional: AdamState::zeros_like(&params.positional),
            layers: params.layers.iter().map(LayerAdam::new).collect(),
            lnf_gamma: AdamState::zeros_like(&params.lnf_gamma),
            lnf_beta: AdamState::zeros_like(&params.lnf_beta),
            w_out: AdamState::zeros_like(&params.w_out),
            b_out: AdamState::zeros_like(&params.b_out),
            hyper: AdamHyper::default(),
        }
    }

    fn apply(
        &mut self,
        params: &mut ModelParams<f32>,
        grads: &crate::model::ParamGrads<f32>,
        d_embedding: &Array2<f32>,
        d_positional: &Array2<f32>,
        lr: f64,
    ) {
        let h = &self.hyper;
        self.embedding
            .step(params.embedding.view_mut(), d_embedding.view(), lr, h);
        self.positional
            .step(params.positional.view_mut(), d_positional.view(), lr, h);
        for ((layer, adam), g) in params
            .layers
            .iter_mut()
            .zip(self.layers.iter_mut())
            .zip(grads.layers.iter())
        {
            adam.ln1_gamma
                .step(layer.ln1_gamma.view_mut(), g.ln1_gamma.view(), lr, h);
            adam.ln1_beta
                .step(layer.ln1_beta.view_mut(), g.ln1_beta.view(), lr, h);
            adam.w_qkv.step(layer.w_qkv.view_mut(), g.w_qkv.view(), lr, h);
            adam.b_qkv.step(layer.b_qkv.view_mut(), g.b_qkv.view(), lr, h);
            adam.w_o.step(layer.w_o.view_mut(), g.w_o.view(), lr, h);
            adam.b_o.step(layer.b_o.view_mut(), g.b_o.view(), lr, h);
            adam.ln2_gamma
                .step(layer.ln2_gamma.view_mut(), g.ln2_gamma.view(), lr, h);
            adam.ln2_beta
                .step(layer.ln2_beta.view_mut(), g.ln2_beta.view(), lr, h);
            adam.w1.step(layer.w1.view_mut(), g.w1.view(), lr, h);
            adam.b1.step(layer.b1.view_mut(), g.b1.view(), lr, h);
            adam.w2.step(layer.w2.view_mut(), g.w2.view(), lr, h);
            adam.b2.step(layer.b2.view_mut(), g.b2.view(), lr, h);
        }
        self.lnf_gamma
            .step(params.lnf_gamma.view_mut(), grads.lnf_gamma.view(), lr, h);
        self.lnf_beta
            .step(params.lnf_beta.view_mut(), grads.lnf_beta.view(), lr, h);
        self.w_out
            .step(params.w_out.view_mut(), grads.w_out.view(), lr, h);
        self.b_out
            .step(params.b_out.view_mut(), grads.b_out.view(), lr, h);
    }
}

/// Encodes corpus lines, splits them into train/validation by a fixed
/// stride, and groups each side into length-sorted padded batches.
fn prepare_batches(
    vocab: &Vocabulary,
    corpus: &str,
    settings: &PretrainSettings,
) -> Result<(Vec<Vec<Vec<u32>>>, Vec<Vec<Vec<u32>>>)> {
    let stride = (1.0 / settings.val_fraction).round().max(2.0) as usize;
    let mut train_seqs = Vec::new();
    let mut val_seqs = Vec::new();
    for (i, line) in corpus.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let mut seq = encode_prompt(vocab, line)?;
        seq.push(EOS_ID);
        if seq.len() > settings.context {
            return Err(Error::ContextOverflow {
                len: seq.len(),
                context: settings.context,
            });
        }
        let ids = seq.ids().to_vec();
        if i % stride == 0 {
            val_seqs.push(ids);
        } else {
            train_seqs.push(ids);
        }
    }
    if train_seqs.is_empty() || val_seqs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let to_batches = |mut seqs: Vec<Vec<u32>>, batch_size: usize| -> Vec<Vec<Vec<u32>>> {
        seqs.sort_by_key(Vec::len);
        seqs.chunks(batch_size).map(pad_batch).collect()
    };
    Ok((
        to_batches(train_seqs, settings.batch_size),
        to_batches(val_seqs, settings.batch_size),
    ))
}

/// Runs base-model training end to end and writes the artifact family:
/// `<out>` (checkpoint), `<out>.vocab`, `<out>.corpus.txt`, and
/// `<out>.manifest.json`.
pub fn cmd_pretrain(out: &Path, settings: &PretrainSettings, seed: u64) -> Result<PretrainSummary> {
    settings.validate()?;
    let corpus = gen_pretraining_corpus(&settings.corpus, seed)?;
    let vocab = Vocabulary::build(&corpus)?;
    let config = ModelConfig {
        n_layers: settings.n_layers,
        d_model: settings.d_model,
        n_heads: settings.n_heads,
        context: settings.context,
        vocab_size: vocab.len(),
        base_size: vocab.base_size(),
    };
    let mut params = ModelParams::<f32>::init(config, seed)?;
    let (train_batches, val_batches) = prepare_batches(&vocab, &corpus, settings)?;
    let (n_train, n_val) = (
        train_batches.iter().map(Vec::len).sum::<usize>(),
        val_batches.iter().map(Vec::len).sum::<usize>(),
    );

    let mut optimizer = PretrainOptimizer::new(&params);
    let mut evals: Vec<ValPoint> = Vec::new();
    let mut best = f64::INFINITY;
    let mut stale_evals = 0usize;
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..train_batches.len()).collect();
    let mut epoch = 0u64;
    'training: loop {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch, 0xBA7C));
        order.shuffle(&mut rng);
        for &bi in &order {
            let batch = &train_batches[bi];
            let (nll, n, grad) = batch_nll(&params, batch, true)?;
            if !nll.is_finite() {
                return Err(Error::NonFinite("pretraining loss"));
            }
            let (d_logits, cache) = grad.expect("gradient requested");
            let (d_input, param_grads) =
                backward(&params, &cache, &d_logits, BackwardScope::AllParams);
            let param_grads = param_grads.expect("all-params scope");
            let mut d_embedding =
                Array2::<f32>::zeros((params.config.vocab_size, params.config.d_model));
            let mut d_positional =
                Array2::<f32>::zeros((params.config.context, params.config.d_model));
            scatter_input_grads(&cache, &d_input, &mut d_embedding, &mut d_positional);
            optimizer.apply(
                &mut params,
                &param_grads,
                &d_embedding,
                &d_positional,
                settings.learning_rate,
            );
            step += 1;
            let _ = n;

            if step % settings.eval_every == 0 || step >= settings.max_steps {
                let ppl = perplexity(&params, &val_batches)?;
                evals.push(ValPoint {
                    step,
                    perplexity: ppl,
                });
                if ppl < best - settings.min_delta {
                    best = ppl;
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                }
                if stale_evals >= settings.patience || step >= settings.max_steps {
                    break 'training;
                }
            }
        }
        epoch += 1;
    }

    let final_ppl = evals.last().expect("at least one evaluation").perplexity;

    // Artifact family, written only after training succeeded.
    if let Some(dir) = out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let vocab_file = sibling(out, ".vocab");
    let corpus_file = sibling(out, ".corpus.txt");
    std::fs::write(&corpus_file, &corpus).map_err(|e| Error::io(&corpus_file, e))?;
    vocab.save(&vocab_file)?;
    let vocab_name = vocab_file
        .file_name()
        .expect("vocab file name")
        .to_string_lossy()
        .to_string();
    save_checkpoint(&params, &vocab_name, out)?;

    let mut manifest = Manifest::new("pretrain", seed);
    let flat = serde_json::to_value(settings)?;
    manifest.record_config_json("", &flat);
    manifest.record_output(out)?;
    manifest.record_output(&vocab_file)?;
    manifest.record_output(&corpus_file)?;
    let manifest_file = manifest.save_for(out)?;

    Ok(PretrainSummary {
        steps: step,
        final_val_perplexity: final_ppl,
        best_val_perplexity: best.min(final_ppl),
        evals,
        n_train_lines: n_train,
        n_val_lines: n_val,
        vocab_size: vocab.len(),
        checkpoint: out.to_path_buf(),
        vocab_file,
        corpus_file,
        manifest_file,
        checkpoint_hash: file_sha256(out)?,
    })
}

/// `<path><suffix>` in the same directory.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.as_os_str().to_os_string();
    name.push(suffix);
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::next_token_probs;
    use crate::tokenizer::TokenSeq;

    #[test]
    fn padding_masks_do_not_leak_into_the_loss() {
        // Hand-checkable zero model: uniform predictions, so each target
        // costs ln(base_size) regardless of padding.
        let vocab = Vocabulary::build("a b c d").unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context: 16,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        let params = ModelParams::<f32>::zeros(config).unwrap();
        let a = vocab.id_of("a").unwrap();
        let b = vocab.id_of("b").unwrap();
        let padded = pad_batch(&[
            vec![0, a, b, 1],       // BOS a b EOS: 3 targets
            vec![0, a, 1],          // BOS a EOS: 2 targets
        ]);
        assert_eq!(padded[1].len(), 4);
        assert_eq!(padded[1][3], PAD_ID);
        let (nll, n, _) = batch_nll(&params, &padded, false).unwrap();
        assert_eq!(n, 5);
        let expected = 5.0 * (vocab.base_size() as f64).ln();
        assert!((nll - expected).abs() < 1e-5, "nll {nll} vs {expected}");
    }

    #[test]
    fn gradient_direction_reduces_loss_on_one_batch() {
        let vocab = Vocabulary::build("a b c d e f").unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 16,
            n_heads: 2,
            context: 16,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        let mut params = ModelParams::<f32>::init(config, 1).unwrap();
        let mut optimizer = PretrainOptimizer::new(&params);
        let ids: Vec<u32> = ["a", "b", "c", "d", "e"]
            .iter()
            .map(|w| vocab.id_of(w).unwrap())
            .collect();
        let mut seq = vec![0u32];
        seq.extend(&ids);
        seq.push(1);
        let batch = pad_batch(&[seq]);
        let (first, _, _) = batch_nll(&params, &batch, false).unwrap();
        for _ in 0..60 {
            let (_, _, grad) = batch_nll(&params, &batch, true).unwrap();
            let (d_logits, cache) = grad.unwrap();
            let (d_input, param_grads) =
                backward(&params, &cache, &d_logits, BackwardScope::AllParams);
            let mut d_emb = Array2::<f32>::zeros((config.vocab_size, config.d_model));
            let mut d_pos = Array2::<f32>::zeros((config.context, config.d_model));
            scatter_input_grads(&cache, &d_input, &mut d_emb, &mut d_pos);
            optimizer.apply(&mut params, &param_grads.unwrap(), &d_emb, &d_pos, 1e-2);
        }
        let (last, _, _) = batch_nll(&params, &batch, false).unwrap();
        assert!(
            last < first * 0.5,
            "memorising one line should at least halve the loss ({first} -> {last})"
        );
    }

    #[test]
    fn perplexity_of_the_uniform_model_is_the_vocab_size() {
        let vocab = Vocabulary::build("a b c").unwrap();
        let config = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            context: 8,
            vocab_size: vocab.len(),
            base_size: vocab.base_size(),
        };
        let params = ModelParams::<f32>::zeros(config).unwrap();
        let batches = vec![pad_batch(&[vec![0, 3, 4, 1]])];
        let ppl = perplexity(&params, &batches).unwrap();
        assert!((ppl - vocab.base_size() as f64).abs() < 1e-3);
        // Sanity: the uniform model really is uniform.
        let probs =
            next_token_probs(&params, &TokenSeq::new(vec![0, 3]), 1.0).unwrap();
        assert!((probs[0] - 1.0 / vocab.base_size() as f64).abs() < 1e-9);
    }

    #[test]
    fn sibling_paths_share_the_directory() {
        assert_eq!(
            sibling(Path::new("runs/base.ckpt"), ".vocab"),
            PathBuf::from("runs/base.ckpt.vocab")
        );
    }
}
