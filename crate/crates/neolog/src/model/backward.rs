//! Reverse-mode differentiation through the cached forward pass.
//!
//! The same backward walk serves two callers with very different needs:
//! full-parameter gradients for corpus pretraining, and input-embedding
//! gradients only (everything else frozen) for neologism training. The
//! [`BackwardScope`] flag skips the parameter-gradient GEMMs in the second
//! case; the returned gradient with respect to the embedded input is always
//! produced, and the caller scatter-adds it into embedding / positional rows.

use ndarray::{s, Array1, Array2};

use crate::scalar::Real;

use super::forward::{gelu_prime, ForwardCache};
use super::{LayerParams, ModelParams};

/// Which gradients to materialise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardScope {
    /// Weight, bias and norm gradients for every layer (pretraining).
    AllParams,
    /// Only the gradient w.r.t. the embedded input (neologism training:
    /// all weights are frozen, so their gradients would be discarded).
    InputOnly,
}

/// Gradients for one transformer block, same shapes as [`LayerParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads<S> {
    pub ln1_gamma: Array1<S>,
    pub ln1_beta: Array1<S>,
    pub w_qkv: Array2<S>,
    pub b_qkv: Array1<S>,
    pub w_o: Array2<S>,
    pub b_o: Array1<S>,
    pub ln2_gamma: Array1<S>,
    pub ln2_beta: Array1<S>,
    pub w1: Array2<S>,
    pub b1: Array1<S>,
    pub w2: Array2<S>,
    pub b2: Array1<S>,
}

/// Gradients for everything except the embedding tables, which the caller
/// derives from the input gradient (see [`scatter_input_grads`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads<S> {
    pub layers: Vec<LayerGrads<S>>,
    pub lnf_gamma: Array1<S>,
    pub lnf_beta: Array1<S>,
    pub w_out: Array2<S>,
    pub b_out: Array1<S>,
}

/// Row-wise LayerNorm backward. `d_out` is the gradient at the norm output;
/// returns the gradient at the norm input plus gain/bias gradients.
fn layer_norm_backward<S: Real>(
    d_out: &Array2<S>,
    xhat: &Array2<S>,
    rstd: &Array1<S>,
    gamma: &Array1<S>,
) -> (Array2<S>, Array1<S>, Array1<S>) {
    let (n, d) = d_out.dim();
    let inv_d = S::from_f64(1.0 / d as f64);
    let mut d_x = Array2::zeros((n, d));
    let mut d_gamma = Array1::zeros(d);
    let mut d_beta = Array1::zeros(d);
    for i in 0..n {
        let mut m1 = S::zero();
        let mut m2 = S::zero();
        for j in 0..d {
            let g = d_out[[i, j]];
            let h = xhat[[i, j]];
            let dxh = g * gamma[j];
            m1 = m1 + dxh;
            m2 = m2 + dxh * h;
            d_gamma[j] = d_gamma[j] + g * h;
            d_beta[j] = d_beta[j] + g;
        }
        m1 = m1 * inv_d;
        m2 = m2 * inv_d;
        let r = rstd[i];
        for j in 0..d {
            let dxh = d_out[[i, j]] * gamma[j];
            d_x[[i, j]] = r * (dxh - m1 - xhat[[i, j]] * m2);
        }
    }
    (d_x, d_gamma, d_beta)
}

fn column_sums<S: Real>(m: &Array2<S>) -> Array1<S> {
    m.sum_axis(ndarray::Axis(0))
}

/// Propagates `d_logits` (shape `(B*T) x base_size`) back to the embedded
/// input. Returns the input gradient, shape `(B*T) x d`, and — under
/// [`BackwardScope::AllParams`] — gradients for every non-embedding tensor.
pub fn backward<S: Real>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    d_logits: &Array2<S>,
    scope: BackwardScope,
) -> (Array2<S>, Option<ParamGrads<S>>) {
    let cfg = &params.config;
    let want_params = scope == BackwardScope::AllParams;

    // Output head: logits = lnf_out . w_out + b_out
    let d_lnf_out = d_logits.dot(&params.w_out.t());
    let head_grads = want_params.then(|| {
        (
            cache.lnf_out.t().dot(d_logits),
            column_sums(d_logits),
        )
    });
    let (mut d_x, d_lnf_gamma, d_lnf_beta) = layer_norm_backward(
        &d_lnf_out,
        &cache.lnf_xhat,
        &cache.lnf_rstd,
        &params.lnf_gamma,
    );

    let mut layer_grads: Vec<LayerGrads<S>> = Vec::new();
    for (layer, lcache) in params.layers.iter().zip(cache.layers.iter()).rev() {
        let (d_x_in, grads) = backward_layer(layer, lcache, cfg, &d_x, cache.batch.len(), want_params);
        d_x = d_x_in;
        if let Some(g) = grads {
            layer_grads.push(g);
        }
    }
    layer_grads.reverse();

    let grads = want_params.then(|| {
        let (w_out, b_out) = head_grads.expect("head grads computed under AllParams");
        ParamGrads {
            layers: layer_grads,
            lnf_gamma: d_lnf_gamma,
            lnf_beta: d_lnf_beta,
            w_out,
            b_out,
        }
    });
    (d_x, grads)
}

fn backward_layer<S: Real>(
    layer: &LayerParams<S>,
    cache: &super::forward::LayerCache<S>,
    cfg: &super::ModelConfig,
    d_x_out: &Array2<S>,
    b: usize,
    want_params: bool,
) -> (Array2<S>, Option<LayerGrads<S>>) {
    let t = cache.qkv.nrows() / b;
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let scale = S::from_f64(1.0 / (dh as f64).sqrt());

    // ---- MLP branch: x_out = x_mid + gelu(ln2(x_mid) . w1 + b1) . w2 + b2
    let d_mlp_out = d_x_out; // residual add copies the gradient
    let d_g1 = d_mlp_out.dot(&layer.w2.t());
    let mut d_u1 = d_g1;
    ndarray::Zip::from(&mut d_u1)
        .and(&cache.u1)
        .for_each(|g, &u| *g = *g * gelu_prime(u));
    let d_ln2_out = d_u1.dot(&layer.w1.t());
    let mlp_w_grads = want_params.then(|| {
        (
            cache.ln2_out.t().dot(&d_u1),   // w1
            column_sums(&d_u1),             // b1
            cache.g1.t().dot(d_mlp_out),    // w2
            column_sums(d_mlp_out),         // b2
        )
    });
    let (d_x_mid_norm, d_ln2_gamma, d_ln2_beta) = layer_norm_backward(
        &d_ln2_out,
        &cache.ln2_xhat,
        &cache.ln2_rstd,
        &layer.ln2_gamma,
    );
    let d_x_mid = d_x_out + &d_x_mid_norm;

    // ---- attention branch: x_mid = x_in + attn(ln1(x_in)) . w_o + b_o
    let d_attn_out = &d_x_mid;
    let d_attn_concat = d_attn_out.dot(&layer.w_o.t());
    let attn_w_grads = want_params.then(|| {
        (
            cache.attn_concat.t().dot(d_attn_out), // w_o
            column_sums(d_attn_out),               // b_o
        )
    });

    // Per-(batch, head) attention backward into the fused qkv gradient.
    let mut d_qkv = Array2::<S>::zeros((b * t, 3 * d));
    for bi in 0..b {
        let rows = s![bi * t..(bi + 1) * t, ..];
        let qkv_b = cache.qkv.slice(rows);
        for h in 0..n_heads {
            let att = &cache.att[bi * n_heads + h];
            let q = qkv_b.slice(s![.., h * dh..(h + 1) * dh]);
            let k = qkv_b.slice(s![.., d + h * dh..d + (h + 1) * dh]);
            let v = qkv_b.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
            let d_out_head =
                d_attn_concat.slice(s![bi * t..(bi + 1) * t, h * dh..(h + 1) * dh]);

            let d_att = d_out_head.dot(&v.t());
            let d_v = att.t().dot(&d_out_head);

            // Softmax backward per row; masked entries have att = 0 and so
            // contribute nothing.
            let mut d_scores = Array2::<S>::zeros((t, t));
            for i in 0..t {
                let mut dot = S::zero();
                for j in 0..=i {
                    dot = dot + d_att[[i, j]] * att[[i, j]];
                }
                for j in 0..=i {
                    d_scores[[i, j]] = att[[i, j]] * (d_att[[i, j]] - dot) * scale;
                }
            }
            let d_q = d_scores.dot(&k);
            let d_k = d_scores.t().dot(&q);

            d_qkv
                .slice_mut(s![bi * t..(bi + 1) * t, h * dh..(h + 1) * dh])
                .assign(&d_q);
            d_qkv
                .slice_mut(s![bi * t..(bi + 1) * t, d + h * dh..d + (h + 1) * dh])
                .assign(&d_k);
            d_qkv
                .slice_mut(s![
                    bi * t..(bi + 1) * t,
                    2 * d + h * dh..2 * d + (h + 1) * dh
                ])
                .assign(&d_v);
        }
    }

    let d_ln1_out = d_qkv.dot(&layer.w_qkv.t());
    let qkv_w_grads = want_params.then(|| {
        (
            cache.ln1_out.t().dot(&d_qkv), // w_qkv
            column_sums(&d_qkv),           // b_qkv
        )
    });
    let (d_x_in_norm, d_ln1_gamma, d_ln1_beta) = layer_norm_backward(
        &d_ln1_out,
        &cache.ln1_xhat,
        &cache.ln1_rstd,
        &layer.ln1_gamma,
    );
    let d_x_in = d_x_mid + &d_x_in_norm;

    let grads = want_params.then(|| {
        let (w1, b1, w2, b2) = mlp_w_grads.expect("mlp grads");
        let (w_o, b_o) = attn_w_grads.expect("attn grads");
        let (w_qkv, b_qkv) = qkv_w_grads.expect("qkv grads");
        LayerGrads {
            ln1_gamma: d_ln1_gamma,
            ln1_beta: d_ln1_beta,
            w_qkv,
            b_qkv,
            w_o,
            b_o,
            ln2_gamma: d_ln2_gamma,
            ln2_beta: d_ln2_beta,
            w1,
            b1,
            w2,
            b2,
        }
    });
    (d_x_in, grads)
}

/// Accumulates the embedded-input gradient into embedding rows (by token id)
/// and positional rows (by position). The embedding sum is how a token that
/// appears several times collects all of its occurrences' gradients.
pub fn scatter_input_grads<S: Real>(
    cache: &ForwardCache<S>,
    d_input: &Array2<S>,
    d_embedding: &mut Array2<S>,
    d_positional: &mut Array2<S>,
) {
    let t = cache.seq_len;
    for (bi, seq) in cache.batch.iter().enumerate() {
        for (ti, &id) in seq.iter().enumerate() {
            let src = d_input.row(bi * t + ti);
            let mut erow = d_embedding.row_mut(id as usize);
            erow += &src;
            let mut prow = d_positional.row_mut(ti);
            prow += &src;
        }
    }
}

/// Gradient for one embedding row only: the sum of input-gradient rows at
/// positions holding `token_id`. Zero if the token does not occur.
pub fn embedding_row_grad<S: Real>(
    cache: &ForwardCache<S>,
    d_input: &Array2<S>,
    token_id: u32,
) -> Array1<S> {
    let d = d_input.ncols();
    let t = cache.seq_len;
    let mut grad = Array1::zeros(d);
    for (bi, seq) in cache.batch.iter().enumerate() {
        for (ti, &id) in seq.iter().enumerate() {
            if id == token_id {
                grad += &d_input.row(bi * t + ti);
            }
        }
    }
    grad
}
