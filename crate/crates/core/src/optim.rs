//! SGD and Adam over [`ModelParams`].

use crate::error::{shape, Error, Result};
use crate::nn::ModelParams;

/// `params - lr * grads`.
pub fn apply_sgd(params: &ModelParams, grads: &ModelParams, lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    out.add_scaled(grads, -lr)?;
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first_moment: ModelParams,
    second_moment: ModelParams,
    step: u64,
}

impl OptimizerState {
    pub fn sgd(lr: f64, like: &ModelParams) -> Result<Self> {
        Self::with_kind(OptimizerKind::Sgd, lr, like)
    }

    /// Adam with the usual defaults (0.9, 0.999, 1e-8).
    pub fn adam(lr: f64, like: &ModelParams) -> Result<Self> {
        Self::with_kind(OptimizerKind::Adam, lr, like)
    }

    fn with_kind(kind: OptimizerKind, lr: f64, like: &ModelParams) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::Contract(format!("learning rate {lr} must be positive")));
        }
        Ok(Self {
            kind,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first_moment: like.zeros_like(),
            second_moment: like.zeros_like(),
            step: 0,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self) -> &ModelParams {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &ModelParams {
        &self.second_moment
    }

    /// Applies one update according to `kind`.
    pub fn apply(&mut self, params: &ModelParams, grads: &ModelParams) -> Result<ModelParams> {
        match self.kind {
            OptimizerKind::Sgd => {
                if !self.first_moment.same_shape(params) {
                    return Err(shape("optimizer state does not match parameters"));
                }
                let out = apply_sgd(params, grads, self.lr)?;
                self.step += 1;
                Ok(out)
            }
            OptimizerKind::Adam => apply_adam(params, grads, self),
        }
    }
}

/// One bias-corrected Adam step. Increments the step counter in `state`.
pub fn apply_adam(params: &ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<ModelParams> {
    if !params.same_shape(grads) || !params.same_shape(&state.first_moment) {
        return Err(shape("parameters, gradients and optimizer state must share a shape"));
    }
    let t = state.step + 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    let mut out = params.clone();
    let updates = out
        .values_mut()
        .zip(grads.values())
        .zip(state.first_moment.values_mut().zip(state.second_moment.values_mut()));
    for ((p, &g), (m, v)) in updates {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= state.lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    state.step = t;
    Ok(out)
}
