use crate::model::{Component, Gradients, ModelParams};

use super::TrainError;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

/// `scale * d_model^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_lr(step: u64, d_model: usize, warmup: u64, scale: f64) -> Result<f64, TrainError> {
    if step == 0 {
        return Err(TrainError::InvalidConfig(
            "noam schedule is undefined at step 0".into(),
        ));
    }
    if warmup == 0 || d_model == 0 {
        return Err(TrainError::InvalidConfig(
            "warmup and d_model must be >= 1".into(),
        ));
    }
    let s = step as f64;
    let w = warmup as f64;
    Ok(scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5)))
}

/// Adam with decoupled weight decay. Only tensors in `trainable` components move.
#[derive(Debug, Clone)]
pub struct AdamW {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
    trainable: Vec<Component>,
}

impl AdamW {
    pub fn new(params: &ModelParams, trainable: Vec<Component>) -> Self {
        Self {
            first: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            second: params
                .tensors()
                .iter()
                .map(|t| vec![0.0; t.len()])
                .collect(),
            steps: 0,
            trainable,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients, lr: f64) {
        self.steps += 1;
        let bc1 = 1.0 - BETA1.powi(self.steps as i32);
        let bc2 = 1.0 - BETA2.powi(self.steps as i32);
        for (i, (tensor, grad)) in params
            .tensors_mut()
            .iter_mut()
            .zip(&grads.tensors)
            .enumerate()
        {
            if !self.trainable.contains(&tensor.component) {
                continue;
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            for (j, (p, &g)) in tensor.data.iter_mut().zip(&grad.data).enumerate() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g;
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g * g;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + EPSILON);
                *p = (*p - lr * (update + WEIGHT_DECAY * *p)) as f32 as f64;
            }
        }
    }
}
