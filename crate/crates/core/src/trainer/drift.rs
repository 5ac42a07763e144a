use serde::{Deserialize, Serialize};

use crate::model::{Component, ModelParams};

use super::TrainError;

/// Flattened encoder parameters at a given step, in canonical tensor order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSnapshot {
    pub step: u64,
    pub layout: Vec<(String, usize)>,
    pub values: Vec<f64>,
}

impl EncoderSnapshot {
    pub fn capture(params: &ModelParams, step: u64) -> Self {
        let mut layout = Vec::new();
        let mut values = Vec::new();
        for t in params.component(Component::Encoder) {
            layout.push((t.name.clone(), t.len()));
            values.extend_from_slice(&t.data);
        }
        Self {
            step,
            layout,
            values,
        }
    }
}

/// L2 norm of the encoder weight change between two snapshots.
pub fn parameter_drift(
    initial: &EncoderSnapshot,
    last: &EncoderSnapshot,
) -> Result<f64, TrainError> {
    if initial.layout != last.layout {
        return Err(TrainError::LayoutMismatch(format!(
            "{} tensors vs {} tensors",
            initial.layout.len(),
            last.layout.len()
        )));
    }
    Ok(initial
        .values
        .iter()
        .zip(&last.values)
        .map(|(a, b)| (b - a) * (b - a))
        .sum::<f64>()
        .sqrt())
}
