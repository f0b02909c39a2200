//! First-order optimisers over the flat parameter vector.

use std::ops::Range;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Moment estimates and step counter; serialised into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<f32>,
    pub second_moment: Vec<f32>,
}

impl OptimizerState {
    pub fn new(n_params: usize) -> Self {
        Self {
            step: 0,
            first_moment: vec![0.0; n_params],
            second_moment: vec![0.0; n_params],
        }
    }
}

/// Applies one update to `params[r]` for every range in `active`; other
/// coordinates, and their moments, are left untouched.
pub fn apply(
    config: &OptimizerConfig,
    state: &mut OptimizerState,
    params: &mut [f32],
    grads: &[f32],
    active: &[Range<usize>],
) {
    state.step += 1;
    let lr = config.learning_rate as f32;
    match config.kind {
        OptimizerKind::Sgd => {
            for r in active {
                for i in r.clone() {
                    params[i] -= lr * grads[i];
                }
            }
        }
        OptimizerKind::Adam => {
            let (b1, b2) = (config.beta1 as f32, config.beta2 as f32);
            let t = state.step as i32;
            let bc1 = 1.0 - b1.powi(t);
            let bc2 = 1.0 - b2.powi(t);
            let eps = config.epsilon as f32;
            for r in active {
                for i in r.clone() {
                    let g = grads[i];
                    let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
                    let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
                    state.first_moment[i] = m;
                    state.second_moment[i] = v;
                    params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + eps);
                }
            }
        }
    }
}
