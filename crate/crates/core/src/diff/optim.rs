//! Adam with bias correction and a linear per-epoch learning-rate decay.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::graph::Gradients;
use super::matrix::Matrix;
use super::{DiffError, ParamStore, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: BTreeMap<String, Matrix>,
    second_moment: BTreeMap<String, Matrix>,
}

impl AdamState {
    /// Zero moments shaped like `params`.
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: BTreeMap<String, Matrix> = params
            .iter()
            .map(|(n, m)| (n.clone(), Matrix::zeros(m.rows(), m.cols())))
            .collect();
        Self {
            config,
            step: 0,
            first_moment: zeros.clone(),
            second_moment: zeros,
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Matrix> {
        self.first_moment.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Matrix> {
        self.second_moment.get(name)
    }
}

/// One bias-corrected Adam update of every parameter.
///
/// Parameters without an entry in `grads` are treated as having zero gradient.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &Gradients,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        let p = params
            .get(name)
            .ok_or_else(|| DiffError::Unbound(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(DiffError::GradientShape {
                name: name.clone(),
                param: p.shape(),
                grad: g.shape(),
            });
        }
    }
    for (name, p) in params.iter() {
        let ok = |m: &BTreeMap<String, Matrix>| m.get(name).is_some_and(|x| x.shape() == p.shape());
        if !ok(&state.first_moment) || !ok(&state.second_moment) {
            return Err(DiffError::GradientShape {
                name: name.clone(),
                param: p.shape(),
                grad: state.first_moment.get(name).map_or((0, 0), Matrix::shape),
            });
        }
    }

    state.step += 1;
    let AdamConfig {
        beta1,
        beta2,
        epsilon,
    } = state.config;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state.first_moment.get_mut(name).expect("checked above");
        let v = state.second_moment.get_mut(name).expect("checked above");
        let g = grads.get(name);
        for i in 0..p.data().len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + epsilon);
            p.data_mut()[i] -= update;
        }
    }
    Ok(())
}

/// `lr(epoch) = max(initial - epoch * decay_per_epoch, floor)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub initial: f64,
    pub decay_per_epoch: f64,
    pub floor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            initial: 0.001,
            decay_per_epoch: 0.00001,
            floor: 0.0,
        }
    }
}

impl LrSchedule {
    pub fn lr(&self, epoch: usize) -> f64 {
        (self.initial - epoch as f64 * self.decay_per_epoch).max(self.floor)
    }
}
