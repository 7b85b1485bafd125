//! Adam with coupled L2 weight decay, and the learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::datamodel::{LrSchedule, TrainConfig};
use crate::network::Parameters;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, weight_decay: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.len()])
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. The decay term is added to the gradient before the
    /// moment estimates.
    pub fn update<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let grads: Vec<&Vec<f64>> = grads.tensors().into_iter().map(|(_, g)| g).collect();
        for (((p, g), m), v) in params
            .tensors_mut()
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                let gi = g[i] + self.weight_decay * p[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                p[i] -= lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Learning rate at a fractional epoch position.
///
/// The cyclic schedule is a triangle wave that starts at `lr_min`, peaks at
/// `lr_max` half way through each cycle and returns to `lr_min`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize, step: usize, steps_per_epoch: usize) -> f64 {
    match cfg.schedule {
        LrSchedule::Constant => cfg.learning_rate,
        LrSchedule::Cyclic => {
            let pos = epoch as f64 + step as f64 / steps_per_epoch.max(1) as f64;
            let phase = (pos / cfg.cycle_epochs as f64).fract();
            let tri = 1.0 - (2.0 * phase - 1.0).abs();
            cfg.lr_min + (cfg.lr_max - cfg.lr_min) * tri
        }
    }
}
