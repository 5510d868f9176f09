//! AdamW with per-group learning rates and the two learning-rate schedules.

use fiber_tensor::Tensor;

use crate::params::{Group, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub backbone: f64,
    pub cross_modal: f64,
    pub head: f64,
}

impl GroupRates {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Backbone => self.backbone,
            Group::CrossModal => self.cross_modal,
            Group::Head => self.head,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Schedule {
    /// Linear warmup to the peak, then linear decay to zero at `total`.
    WarmupLinear { warmup: u64, total: u64 },
    /// Linear warmup, constant, then ×0.1 at 67% and again at 89% of `total`.
    WarmupStepDrops { warmup: u64, total: u64 },
}

impl Schedule {
    /// Multiplier of the peak rate at (0-based) `step`.
    pub fn factor(&self, step: u64) -> f64 {
        let (warmup, total) = match *self {
            Schedule::WarmupLinear { warmup, total } | Schedule::WarmupStepDrops { warmup, total } => (warmup, total),
        };
        if step < warmup {
            return (step + 1) as f64 / warmup as f64;
        }
        match self {
            Schedule::WarmupLinear { .. } => {
                let span = total.saturating_sub(warmup).max(1) as f64;
                (1.0 - (step - warmup) as f64 / span).max(0.0)
            }
            Schedule::WarmupStepDrops { .. } => {
                let frac = step as f64 / total.max(1) as f64;
                if frac >= 0.89 {
                    0.01
                } else if frac >= 0.67 {
                    0.1
                } else {
                    1.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = |_: ()| store.iter().map(|(_, p)| Tensor::zeros(p.value.shape().to_vec())).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(()),
            v: zeros(()),
        }
    }

    /// One update. Parameters without a gradient are left untouched
    /// (including weight decay). Decay applies to matrices only.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], rates: GroupRates, factor: f64) {
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, param) in store.values_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            let lr = rates.get(param.group) * factor;
            let decay = if param.value.ndim() >= 2 { self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = param.value.data_mut();
            for k in 0..w.len() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                w[k] -= lr * (update + decay * w[k]);
            }
        }
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            *g = g.scale(s);
        }
    }
    norm
}
