use std::collections::BTreeMap;

use super::ParamSet;
use crate::error::{invalid, Result};

/// Adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Default for OptState {
    fn default() -> Self {
        Self::new(1e-4)
    }
}

impl OptState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// Applies one update from the accumulated gradients, then clears them.
pub fn adam_step(params: &mut ParamSet, opt: &mut OptState) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, g)| g.grad().is_none()) {
        return Err(invalid!("parameter '{name}' has no gradient"));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    for (name, grid) in params.iter_mut() {
        let len = grid.len();
        let (m, v) = opt
            .moments
            .entry(name.to_string())
            .or_insert_with(|| (vec![0.0; len], vec![0.0; len]));
        let grad = grid.grad().expect("checked above").to_vec();
        for (i, (p, g)) in grid.values_mut().iter_mut().zip(&grad).enumerate() {
            m[i] = opt.beta1 * m[i] + (1.0 - opt.beta1) * g;
            v[i] = opt.beta2 * v[i] + (1.0 - opt.beta2) * g * g;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            *p -= opt.lr * mhat / (vhat.sqrt() + opt.eps);
        }
        grid.zero_grad();
    }
    Ok(())
}
