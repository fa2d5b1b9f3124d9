//! Optimizers and learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ADAMAX_BETA1: f64 = 0.9;
pub const ADAMAX_BETA2: f64 = 0.999;
pub const ADAMAX_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamax { lr: f64 },
    SgdMomentum { lr: f64, momentum: f64 },
}

impl OptimizerKind {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Adamax { lr } | OptimizerKind::SgdMomentum { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.base_lr();
        if !(lr.is_finite() && lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "invalid learning rate {lr}"
            )));
        }
        if let OptimizerKind::SgdMomentum { momentum, .. } = *self {
            if !(0.0..1.0).contains(&momentum) {
                return Err(Error::InvalidArgument(format!(
                    "momentum must be in [0, 1), got {momentum}"
                )));
            }
        }
        Ok(())
    }
}

/// Per-parameter optimizer state. For AdaMax `first` is the moment
/// estimate and `second` the infinity norm; SGD uses `first` as velocity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl OptimizerState {
    pub fn new(len: usize) -> Self {
        Self {
            step: 0,
            first: vec![0.0; len],
            second: vec![0.0; len],
        }
    }
}

pub fn adamax_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, lr: f64) {
    state.step += 1;
    let bias = 1.0 - ADAMAX_BETA1.powi(state.step.min(i32::MAX as u64) as i32);
    let rate = lr / bias;
    for i in 0..params.len() {
        let g = grads[i];
        state.first[i] = ADAMAX_BETA1 * state.first[i] + (1.0 - ADAMAX_BETA1) * g;
        state.second[i] = (ADAMAX_BETA2 * state.second[i]).max(g.abs());
        params[i] -= rate * state.first[i] / (state.second[i] + ADAMAX_EPS);
    }
}

/// `v = momentum * v + g; p -= lr * v`.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) {
    state.step += 1;
    for i in 0..params.len() {
        state.first[i] = momentum * state.first[i] + grads[i];
        params[i] -= lr * state.first[i];
    }
}

pub fn optimizer_step(
    kind: &OptimizerKind,
    params: &mut [f64],
    grads: &[f64],
    state: &mut OptimizerState,
    lr: f64,
) {
    match *kind {
        OptimizerKind::Adamax { .. } => adamax_step(params, grads, state, lr),
        OptimizerKind::SgdMomentum { momentum, .. } => {
            sgd_momentum_step(params, grads, state, lr, momentum)
        }
    }
}

/// Piecewise-constant learning rate. Entry `(e, lr)` takes effect from the
/// zero-based epoch `e` onwards; before the first entry the base rate holds.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<(usize, f64)>,
}

impl LrSchedule {
    pub fn constant() -> Self {
        Self::default()
    }

    /// Base rate for 100 epochs, then 1e-4.
    pub fn srnet() -> Self {
        Self {
            milestones: vec![(100, 1e-4)],
        }
    }

    /// Base rate divided by 5 after epochs 20, 35, 50 and 65.
    pub fn zhunet(base: f64) -> Self {
        let mut lr = base;
        Self {
            milestones: [20, 35, 50, 65]
                .into_iter()
                .map(|e| {
                    lr /= 5.0;
                    (e, lr)
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for w in self.milestones.windows(2) {
            if w[1].0 <= w[0].0 {
                return Err(Error::InvalidArgument(
                    "schedule milestones must be strictly increasing".into(),
                ));
            }
        }
        if let Some(&(_, lr)) = self
            .milestones
            .iter()
            .find(|(_, lr)| !(lr.is_finite() && *lr >= 0.0))
        {
            return Err(Error::InvalidArgument(format!(
                "invalid scheduled learning rate {lr}"
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, base: f64, epoch: usize) -> f64 {
        self.milestones
            .iter()
            .rev()
            .find(|(e, _)| *e <= epoch)
            .map(|&(_, lr)| lr)
            .unwrap_or(base)
    }
}
