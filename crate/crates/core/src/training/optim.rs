use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{GradientRecord, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments plus the learning-rate schedule's bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<F> {
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
    pub step: u64,
    pub lr: f64,
    /// Epochs since the best validation loss last improved.
    pub plateau_count: usize,
    pub best_val: Option<f64>,
}

impl<F: Scalar> OptimizerState<F> {
    pub fn new(params: &[Tensor<F>], lr: f64) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            step: 0,
            lr,
            plateau_count: 0,
            best_val: None,
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient leaves parameters
/// and state untouched.
pub fn adam_step<F: Scalar>(
    params: &mut [Tensor<F>],
    grads: &GradientRecord<F>,
    state: &mut OptimizerState<F>,
    cfg: &AdamConfig,
) -> Result<()> {
    let n = params.len();
    if grads.grads.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::shape("parameter, gradient and moment counts differ"));
    }
    for ((p, g), m) in params.iter().zip(&grads.grads).zip(&state.m) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(Error::shape(format!(
                "parameter {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite("gradient; step rejected".into()));
    }
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (F::lit(cfg.beta1), F::lit(cfg.beta2));
    let (c1, c2) = (F::one() - b1, F::one() - b2);
    let bc1 = F::lit(1.0 - cfg.beta1.powf(t));
    let bc2 = F::lit(1.0 - cfg.beta2.powf(t));
    let lr = F::lit(state.lr);
    let eps = F::lit(cfg.eps);
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(&grads.grads)
        .zip(&mut state.m)
        .zip(&mut state.v)
    {
        let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
        for i in 0..p.len() {
            m[i] = b1 * m[i] + c1 * g[i];
            v[i] = b2 * v[i] + c2 * g[i] * g[i];
            let mh = m[i] / bc1;
            let vh = v[i] / bc2;
            p[i] = p[i] - lr * mh / (vh.sqrt() + eps);
        }
    }
    Ok(())
}

/// Divides the learning rate by `factor` whenever the monitored loss has not
/// improved for `patience` epochs, never going below `min_lr`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauSchedule {
    pub min_lr: f64,
    pub factor: f64,
    pub patience: usize,
}

impl PlateauSchedule {
    /// Records one epoch's loss; returns whether it is a new best.
    pub fn observe<F>(&self, state: &mut OptimizerState<F>, loss: f64) -> bool {
        if state.best_val.is_none_or(|b| loss < b) {
            state.best_val = Some(loss);
            state.plateau_count = 0;
            return true;
        }
        state.plateau_count += 1;
        if state.plateau_count >= self.patience {
            state.lr = (state.lr / self.factor).max(self.min_lr);
            state.plateau_count = 0;
        }
        false
    }
}
