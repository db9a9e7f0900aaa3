//! Adam with bias correction and a linear learning-rate schedule.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub start: f64,
    pub end: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { start: 1e-4, end: 1e-5 }
    }
}

/// Linear interpolation from `start` at step 0 to `end` at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, schedule: LrSchedule) -> f64 {
    if total_steps == 0 {
        return schedule.start;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    schedule.start + (schedule.end - schedule.start) * t
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl OptimizerState {
    /// Zeroed accumulators mirroring `params`.
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.extents())).collect();
        OptimizerState { first_moment: zeros(), second_moment: zeros(), step: 0, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(params: &mut [Tensor], grads: &[Tensor], state: &mut OptimizerState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(shape_err!(
            "adam: {} parameters, {} gradients, {} accumulators",
            params.len(),
            grads.len(),
            state.first_moment.len()
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.extents() != g.extents() || p.extents() != state.first_moment[i].extents() {
            return Err(shape_err!("adam: parameter {i} has extents {:?} but gradient {:?}", p.extents(), g.extents()));
        }
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("adam: learning rate {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.first_moment[i].data_mut();
        let v = state.second_moment[i].data_mut();
        for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            *w -= lr * m_hat / (libm::sqrt(v_hat) + eps);
        }
    }
    Ok(())
}
