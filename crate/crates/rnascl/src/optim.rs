//! SGD with momentum and the two learning-rate schedules used by the
//! training profiles.

use std::f64::consts::PI;

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Piecewise schedule drops the rate to 10% and then 1% of the base at
/// 75% and 90% of the epoch budget; cosine decays smoothly to zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Step,
    Cosine,
}

pub fn lr_at(schedule: LrSchedule, base: f64, epoch: usize, total_epochs: usize) -> f64 {
    debug_assert!(total_epochs > 0);
    let frac = epoch as f64 / total_epochs as f64;
    match schedule {
        LrSchedule::Step => {
            if frac >= 0.9 {
                base * 0.01
            } else if frac >= 0.75 {
                base * 0.1
            } else {
                base
            }
        }
        LrSchedule::Cosine => base * 0.5 * (1.0 + (PI * frac).cos()),
    }
}

/// Stochastic gradient descent with classical momentum:
///
/// ```text
/// v <- momentum * v + grad + weight_decay * param
/// param <- param - lr * v
/// ```
///
/// Velocity buffers are keyed by slot order, so every call must pass the
/// same parameters in the same order.
pub struct Sgd<E: Real> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<E>>,
}

impl<E: Real> Sgd<E> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: Vec::new(),
        }
    }

    /// Apply one update. `grads[i]` must match `params[i]` elementwise; a
    /// missing gradient (`None`) leaves that slot and its velocity alone.
    pub fn step(&mut self, params: &mut [&mut Tensor<E>], grads: &[Option<&[E]>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::WeightCountMismatch {
                expected: params.len(),
                got: grads.len(),
            });
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![E::zero(); p.numel()]).collect();
        }
        if self.velocity.len() != params.len() {
            return Err(Error::WeightCountMismatch {
                expected: self.velocity.len(),
                got: params.len(),
            });
        }
        let lr = real::<E>(self.lr);
        let momentum = real::<E>(self.momentum);
        let wd = real::<E>(self.weight_decay);
        for ((param, grad), vel) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(grad) = grad else { continue };
            if grad.len() != param.numel() || vel.len() != param.numel() {
                return Err(Error::WeightCountMismatch {
                    expected: param.numel(),
                    got: grad.len(),
                });
            }
            for ((p, &g), v) in param.data_mut().iter_mut().zip(*grad).zip(vel.iter_mut()) {
                *v = momentum * *v + g + wd * *p;
                *p -= lr * *v;
            }
        }
        Ok(())
    }
}
