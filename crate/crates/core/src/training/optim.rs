use serde::{Deserialize, Serialize};

use crate::numerics::{ParamId, ParamStore, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Adadelta,
}

impl std::str::FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "adam" => Ok(Self::Adam),
            "adadelta" => Ok(Self::Adadelta),
            other => Err(format!("unknown optimizer {other:?} (expected adam or adadelta)")),
        }
    }
}

/// Per-parameter first/second moment buffers (Adam) or squared-gradient and
/// squared-update averages (Adadelta).
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    state: Vec<Option<(Tensor, Tensor)>>,
    steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, store: &ParamStore) -> Self {
        Self {
            kind,
            state: vec![None; store.len()],
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// One update of `ids` from the gradients currently held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, ids: &[ParamId], lr: f64) {
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for &id in ids {
            let p = store.get_mut(id);
            let slot = &mut self.state[id.index()];
            let (a, b) = slot.get_or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let (a, b) = (a.data_mut(), b.data_mut());
            let grad = p.grad.data();
            let value = p.value.data_mut();
            match self.kind {
                OptimizerKind::Adam => {
                    for i in 0..value.len() {
                        let g = grad[i];
                        a[i] = ADAM_BETA1 * a[i] + (1.0 - ADAM_BETA1) * g;
                        b[i] = ADAM_BETA2 * b[i] + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = a[i] / bc1;
                        let v_hat = b[i] / bc2;
                        value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
                OptimizerKind::Adadelta => {
                    for i in 0..value.len() {
                        let g = grad[i];
                        a[i] = ADADELTA_RHO * a[i] + (1.0 - ADADELTA_RHO) * g * g;
                        let delta = -((b[i] + ADADELTA_EPS).sqrt() / (a[i] + ADADELTA_EPS).sqrt()) * g;
                        b[i] = ADADELTA_RHO * b[i] + (1.0 - ADADELTA_RHO) * delta * delta;
                        value[i] += lr * delta;
                    }
                }
            }
        }
    }
}

pub fn global_grad_norm(store: &ParamStore, ids: &[ParamId]) -> f64 {
    ids.iter().map(|&id| store.grad(id).sum_squares()).sum::<f64>().sqrt()
}

/// Rescales the gradients of `ids` so their global norm is at most
/// `clip_norm`; returns the norm before clipping.
pub fn clip_gradients(store: &mut ParamStore, ids: &[ParamId], clip_norm: f64) -> f64 {
    let norm = global_grad_norm(store, ids);
    if clip_norm > 0.0 && norm > clip_norm {
        let scale = clip_norm / norm;
        for &id in ids {
            for g in store.get_mut(id).grad.data_mut() {
                *g *= scale;
            }
        }
    }
    norm
}

/// Global-norm clipping followed by one optimizer update.
pub fn clip_and_step(
    store: &mut ParamStore,
    ids: &[ParamId],
    clip_norm: f64,
    optimizer: &mut Optimizer,
    lr: f64,
) -> f64 {
    let norm = clip_gradients(store, ids, clip_norm);
    optimizer.step(store, ids, lr);
    norm
}

/// Linear warmup from `lr / warmup` to `lr` over the first `warmup` steps.
pub fn warmup_lr(lr: f64, step: usize, warmup: usize) -> f64 {
    if warmup == 0 {
        lr
    } else {
        lr * ((step + 1) as f64 / warmup as f64).min(1.0)
    }
}
