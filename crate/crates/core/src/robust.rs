//! Differentiable robust averaging of ensemble predictions.
//!
//! Starting from the mean, a fixed number of Weiszfeld steps (inverse-distance
//! weights) approach the geometric median; a further fixed number of Gaussian
//! mean-shift steps then pull the estimate into the locally dominant mode.
//! Every step is a weighted average of the inputs, so the whole computation
//! unrolls into a static graph with exact reverse-mode derivatives and no
//! learnable parameters.

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmConfig {
    pub weiszfeld_iters: usize,
    pub meanshift_iters: usize,
    /// Mean-shift kernel standard deviation, meters.
    pub sigma: f64,
    /// Lower bound on distances in the Weiszfeld weights, meters.
    pub epsilon_guard: f64,
}

impl Default for GmConfig {
    fn default() -> Self {
        Self {
            weiszfeld_iters: 10,
            meanshift_iters: 10,
            sigma: 0.025,
            epsilon_guard: 1e-9,
        }
    }
}

impl GmConfig {
    pub fn validate(&self) -> Result<(), GmError> {
        if !(self.sigma > 0.0) || !(self.epsilon_guard > 0.0) {
            return Err(GmError::InvalidConfig(format!(
                "sigma {} and epsilon_guard {} must be positive",
                self.sigma, self.epsilon_guard
            )));
        }
        Ok(())
    }

    fn total_iters(&self) -> usize {
        self.weiszfeld_iters + self.meanshift_iters
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GmError {
    #[error("robust average needs at least one input point")]
    Empty,
    #[error("invalid robust-average config: {0}")]
    InvalidConfig(String),
    #[error("state does not belong to these inputs")]
    StaleState,
}

/// Everything the forward pass produced, kept for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GmState {
    pub config: GmConfig,
    pub inputs: Vec<Vector3<f64>>,
    /// `iterates[0]` is the mean, `iterates[t + 1]` the result of step `t`.
    pub iterates: Vec<Vector3<f64>>,
    /// Normalized weights `w_i / Σ w` used in each step.
    pub weights: Vec<Vec<f64>>,
}

impl GmState {
    pub fn output(&self) -> Vector3<f64> {
        *self.iterates.last().expect("at least the mean")
    }
}

fn step_weights(
    y: &Vector3<f64>,
    points: &[Vector3<f64>],
    weiszfeld: bool,
    cfg: &GmConfig,
) -> Vec<f64> {
    let mut w: Vec<f64> = if weiszfeld {
        points
            .iter()
            .map(|q| 1.0 / (y - q).norm().max(cfg.epsilon_guard))
            .collect()
    } else {
        // log-domain with the maximum subtracted; the shift cancels in the
        // normalized average and keeps far-away iterates from underflowing
        let inv = 1.0 / (2.0 * cfg.sigma * cfg.sigma);
        let logs: Vec<f64> = points.iter().map(|q| -(y - q).norm_squared() * inv).collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logs.iter().map(|l| (l - max).exp()).collect()
    };
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Robust average of `points` together with the state needed for gradients.
pub fn gm_forward(
    points: &[Vector3<f64>],
    config: &GmConfig,
) -> Result<(Vector3<f64>, GmState), GmError> {
    if points.is_empty() {
        return Err(GmError::Empty);
    }
    config.validate()?;
    let mean = points.iter().sum::<Vector3<f64>>() / points.len() as f64;
    let mut iterates = Vec::with_capacity(config.total_iters() + 1);
    let mut weights = Vec::with_capacity(config.total_iters());
    iterates.push(mean);
    for t in 0..config.total_iters() {
        let y = iterates[t];
        let w = step_weights(&y, points, t < config.weiszfeld_iters, config);
        let next = points
            .iter()
            .zip(&w)
            .fold(Vector3::zeros(), |acc, (q, wi)| acc + q * *wi);
        iterates.push(next);
        weights.push(w);
    }
    let state = GmState {
        config: *config,
        inputs: points.to_vec(),
        iterates,
        weights,
    };
    Ok((state.output(), state))
}

/// Convenience wrapper returning only the robust average.
pub fn geometric_median(points: &[Vector3<f64>], config: &GmConfig) -> Result<Vector3<f64>, GmError> {
    gm_forward(points, config).map(|(q, _)| q)
}

/// Reverse-mode derivative: maps `dL/dq̃` to `dL/dq_i` for every input.
///
/// Differentiates through every unrolled step, including the dependence of
/// the weights on both the previous iterate and the inputs.
pub fn gm_backward(state: &GmState, upstream: &Vector3<f64>) -> Vec<Vector3<f64>> {
    let cfg = &state.config;
    let q = &state.inputs;
    let n = q.len();
    let mut grads = vec![Vector3::zeros(); n];
    let mut y_bar = *upstream;
    for t in (0..state.weights.len()).rev() {
        let y = state.iterates[t];
        let y_next = state.iterates[t + 1];
        let alpha = &state.weights[t];
        let weiszfeld = t < cfg.weiszfeld_iters;
        let mut y_prev_bar = Vector3::zeros();
        for i in 0..n {
            grads[i] += y_bar * alpha[i];
            let s = y_bar.dot(&(q[i] - y_next));
            let d = y - q[i];
            // d(log w)/dd, scaled by the normalized weight
            let g = if weiszfeld {
                let r2 = d.norm_squared();
                if r2.sqrt() > cfg.epsilon_guard {
                    -alpha[i] * s / r2
                } else {
                    0.0
                }
            } else {
                -alpha[i] * s / (cfg.sigma * cfg.sigma)
            };
            let d_bar = d * g;
            y_prev_bar += d_bar;
            grads[i] -= d_bar;
        }
        y_bar = y_prev_bar;
    }
    let share = y_bar / n as f64;
    grads.iter_mut().for_each(|g| *g += share);
    grads
}

/// [`gm_backward`] after checking that `state` was produced from `points`.
pub fn gm_backward_checked(
    state: &GmState,
    points: &[Vector3<f64>],
    upstream: &Vector3<f64>,
) -> Result<Vec<Vector3<f64>>, GmError> {
    if state.inputs != points || state.iterates.len() != state.weights.len() + 1 {
        return Err(GmError::StaleState);
    }
    Ok(gm_backward(state, upstream))
}

/// Post-hoc robust averaging of per-pixel ensemble predictions.
pub fn apply_pgm(
    predictions: &[Vec<Vector3<f64>>],
    config: &GmConfig,
) -> Result<Vec<Vector3<f64>>, GmError> {
    predictions
        .par_iter()
        .map(|p| geometric_median(p, config))
        .collect()
}
