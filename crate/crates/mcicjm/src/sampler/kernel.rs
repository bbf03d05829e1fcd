//! Adaptive random-walk Metropolis building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Robbins-Monro adaptation of a log proposal scale toward a target
/// acceptance rate. Only active while the chain is adapting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptiveScale {
    pub log_scale: f64,
    pub target: f64,
    pub count: u64,
}

impl AdaptiveScale {
    pub fn new(initial_scale: f64, target: f64) -> Self {
        AdaptiveScale { log_scale: initial_scale.ln(), target, count: 0 }
    }

    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    /// Feed back the acceptance probability of the last proposal.
    pub fn update(&mut self, accept_prob: f64) {
        self.count += 1;
        let gain = (self.count as f64).powf(-0.6);
        self.log_scale += gain * (accept_prob - self.target);
        // keep proposals in a sane range
        self.log_scale = self.log_scale.clamp(-15.0, 8.0);
    }
}

/// Standard target acceptance rates.
pub const TARGET_SCALAR: f64 = 0.44;
pub const TARGET_BLOCK: f64 = 0.234;

/// One symmetric Gaussian random-walk Metropolis step on a generic target.
///
/// `shape` optionally maps an isotropic draw into a correlated proposal (a
/// lower-triangular factor, row-major `dim x dim`). Returns the new state,
/// its log density, and the acceptance probability of the proposal.
pub fn mh_update_block<R: Rng, F: FnMut(&[f64]) -> f64>(
    current: &[f64],
    log_target_current: f64,
    mut log_target: F,
    scale: f64,
    shape: Option<&[f64]>,
    rng: &mut R,
) -> (Vec<f64>, f64, f64, bool) {
    let dim = current.len();
    let z: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
    let mut proposal = current.to_vec();
    match shape {
        Some(l) => {
            for i in 0..dim {
                let mut step = 0.0;
                for j in 0..=i {
                    step += l[i * dim + j] * z[j];
                }
                proposal[i] += scale * step;
            }
        }
        None => {
            for i in 0..dim {
                proposal[i] += scale * z[i];
            }
        }
    }
    let log_target_prop = log_target(&proposal);
    let delta = log_target_prop - log_target_current;
    let accept_prob = if delta.is_nan() { 0.0 } else { delta.min(0.0).exp() };
    let accept = delta >= 0.0
        || (log_target_prop > f64::NEG_INFINITY
            && rng.random::<f64>().ln() < delta);
    if accept {
        (proposal, log_target_prop, accept_prob, true)
    } else {
        (current.to_vec(), log_target_current, accept_prob, false)
    }
}

pub fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    crate::stats::normal_quantile(rng.random::<f64>().clamp(1e-16, 1.0 - 1e-16))
}
