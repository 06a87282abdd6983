//! Relaxed categorical sampling for architecture weights.
//!
//! Both the channel masks and the tutor assignments are categorical choices
//! relaxed with Gumbel noise so the loss stays differentiable in the
//! architecture parameters. The temperature starts high enough that all
//! options contribute and is annealed multiplicatively per epoch until the
//! weights are effectively one-hot.

use rand::Rng;

use crate::dtype::{real, Real};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Temperature at epoch e is `initial * exp(-decay * e)`.
#[derive(Clone, Copy, Debug)]
pub struct TauSchedule {
    pub initial: f64,
    pub decay: f64,
}

impl TauSchedule {
    pub fn standard() -> Self {
        TauSchedule {
            initial: 5.0,
            decay: 0.045,
        }
    }

    pub fn at(&self, epoch: usize) -> f64 {
        self.initial * (-self.decay * epoch as f64).exp()
    }
}

/// One draw from the standard Gumbel distribution: -ln(-ln(U)), U ~ (0, 1).
pub fn standard_gumbel<E: Real, R: Rng>(rng: &mut R) -> E {
    let u = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    real(-(-u.ln()).ln())
}

/// Tensor of independent standard Gumbel draws.
pub fn gumbel_noise<E: Real, R: Rng>(rng: &mut R, shape: Vec<usize>) -> Tensor<E> {
    Tensor::from_fn(shape, |_| standard_gumbel(rng))
}

/// Softmax of `(logits + noise) / tau` along the last axis. Logits and
/// noise must share a shape; `tau` must be strictly positive.
pub fn gumbel_softmax<E: Real>(g: &mut Graph<E>, logits: Var, tau: f64, noise: Var) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::NonPositiveTemperature { tau });
    }
    let rank = g.value(logits).rank();
    let axis = rank.saturating_sub(1);
    let shifted = g.add(logits, noise)?;
    let inv_tau = g.constant(real::<E>(1.0 / tau));
    let scaled = g.mul(shifted, inv_tau)?;
    g.softmax(scaled, axis)
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax<E: Real>(values: &[E]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// One-hot vector of length `n` selecting `index`.
pub fn one_hot<E: Real>(n: usize, index: usize) -> Tensor<E> {
    debug_assert!(index < n);
    Tensor::from_fn(vec![n], |i| if i == index { E::one() } else { E::zero() })
}
