//! Adam optimizer and the warmup + step-decay learning-rate schedule.

use std::collections::BTreeMap;

use crate::tensor::ParameterStore;

use super::config::TrainConfig;

/// First and second moment buffers for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// Exportable optimizer state for checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub slots: Vec<(String, AdamSlot)>,
}

/// Plain Adam with bias correction. Parameters update in sorted-name order,
/// so a step is bit-reproducible.
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    slots: BTreeMap<String, AdamSlot>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step_count: 0,
            slots: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update over every parameter in the store using its accumulated
    /// gradient (missing gradients count as zero).
    pub fn step(&mut self, store: &ParameterStore, lr: f64) {
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, param) in store.iter() {
            let n = param.numel();
            let grad = param.grad().unwrap_or_else(|| vec![0.0; n]);
            let slot = self
                .slots
                .entry(name.to_string())
                .or_insert_with(|| AdamSlot { m: vec![0.0; n], v: vec![0.0; n] });
            let mut data = param.to_vec();
            for i in 0..n {
                slot.m[i] = self.beta1 * slot.m[i] + (1.0 - self.beta1) * grad[i];
                slot.v[i] = self.beta2 * slot.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = slot.m[i] / bc1;
                let v_hat = slot.v[i] / bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
            param.set_data(data).expect("same shape");
        }
    }

    pub fn export_state(&self) -> AdamState {
        AdamState {
            step_count: self.step_count,
            slots: self.slots.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
        }
    }

    pub fn import_state(&mut self, state: AdamState) {
        self.step_count = state.step_count;
        self.slots = state.slots.into_iter().collect();
    }
}

/// Learning rate at a fractional epoch position: linear warmup from
/// `lr_start` to `lr_base` over `warmup_epochs`, then `lr_base` multiplied by
/// `decay_factor` once per passed decay epoch.
pub fn lr_at(cfg: &TrainConfig, fractional_epoch: f64) -> f64 {
    if cfg.warmup_epochs > 0.0 && fractional_epoch < cfg.warmup_epochs {
        let t = fractional_epoch / cfg.warmup_epochs;
        cfg.lr_start + (cfg.lr_base - cfg.lr_start) * t
    } else {
        let decays = cfg
            .decay_epochs
            .iter()
            .filter(|&&e| fractional_epoch >= e as f64)
            .count() as i32;
        cfg.lr_base * cfg.decay_factor.powi(decays)
    }
}
