//! Adam optimizer state, one instance per parameter tensor.
//!
//! Each state tracks its own step count; tensors updated in lock-step (as in
//! full-model pretraining) therefore share identical bias-correction terms.

use ndarray::{Array, ArrayView, ArrayViewMut, Dimension};

use crate::scalar::Real;

/// Adam moment-decay hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First/second moment estimates and step count for one tensor.
#[derive(Debug, Clone)]
pub struct AdamState<S, D: Dimension> {
    m: Array<S, D>,
    v: Array<S, D>,
    t: u64,
}

impl<S: Real, D: Dimension> AdamState<S, D> {
    pub fn zeros_like(param: &Array<S, D>) -> Self {
        AdamState {
            m: Array::zeros(param.raw_dim()),
            v: Array::zeros(param.raw_dim()),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One bias-corrected in-place update of `param`.
    pub fn step(
        &mut self,
        mut param: ArrayViewMut<'_, S, D>,
        grad: ArrayView<'_, S, D>,
        lr: f64,
        hyper: &AdamHyper,
    ) {
        self.t += 1;
        let b1 = S::from_f64(hyper.beta1);
        let b2 = S::from_f64(hyper.beta2);
        let one = S::one();
        let eps = S::from_f64(hyper.eps);
        let corr1 = S::from_f64(1.0 - hyper.beta1.powi(self.t as i32));
        let corr2 = S::from_f64(1.0 - hyper.beta2.powi(self.t as i32));
        let lr = S::from_f64(lr);
        ndarray::Zip::from(&mut param)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(&grad)
            .for_each(|p, m, v, &g| {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let mhat = *m / corr1;
                let vhat = *v / corr2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            });
    }
}
