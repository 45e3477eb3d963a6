//! Iterative sign-gradient attack and Gaussian input noise.

use ndarray::{Array2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toy::data::TaskTarget;
use crate::toy::net::BranchedNet;
use crate::toy::rng_for;

/// Attack budget. `epsilon` and `step_size` are in schedule units; one
/// schedule unit is `scale` input units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub step_size: f64,
    pub scale: f64,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        AttackConfig {
            epsilon,
            step_size: 1.0,
            scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epsilon", self.epsilon),
            ("step size", self.step_size),
            ("scale", self.scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Range(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        iterations(self.epsilon)
    }

    /// L-infinity radius in input units.
    pub fn radius(&self) -> f64 {
        self.epsilon * self.scale
    }
}

/// `max(1, floor(min(eps + 4, ceil(1.25 eps))))`.
pub fn iterations(epsilon: f64) -> usize {
    let raw = (epsilon + 4.0).min((1.25 * epsilon).ceil()).floor();
    if raw >= 1.0 {
        raw as usize
    } else {
        1
    }
}

/// A differentiable loss of an input batch.
pub trait AttackTarget {
    fn loss_and_input_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)>;
}

/// One task's loss in a toy network.
pub struct TaskLoss<'a> {
    pub net: &'a BranchedNet,
    pub task: usize,
    pub targets: &'a [TaskTarget],
}

impl TaskLoss<'_> {
    fn weights(&self) -> Vec<f64> {
        (0..self.targets.len())
            .map(|t| if t == self.task { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn loss(&self, x: &Array2<f64>) -> Result<f64> {
        Ok(self.net.losses(x, self.targets)?[self.task])
    }
}

impl AttackTarget for TaskLoss<'_> {
    fn loss_and_input_grad(&self, x: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        let lg = self.net.loss_and_grads(x, self.targets, &self.weights())?;
        Ok((lg.total, lg.input_grad))
    }
}

/// Ascends the target loss from the clean input, projecting onto the
/// epsilon ball around `x` and then onto `bounds` after every step.
pub fn pgd_attack<M: AttackTarget + ?Sized>(
    model: &M,
    x: &Array2<f64>,
    cfg: &AttackConfig,
    bounds: Option<(f64, f64)>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    let radius = cfg.radius();
    let step = cfg.step_size * cfg.scale;
    let mut adv = x.clone();
    for it in 0..cfg.iterations() {
        let (_, grad) = model.loss_and_input_grad(&adv)?;
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite input gradient at attack step {it}"
            )));
        }
        Zip::from(&mut adv).and(x).and(&grad).for_each(|a, &x0, &g| {
            let s = if g > 0.0 {
                1.0
            } else if g < 0.0 {
                -1.0
            } else {
                0.0
            };
            let mut v = (*a + step * s).clamp(x0 - radius, x0 + radius);
            if let Some((lo, hi)) = bounds {
                v = v.clamp(lo, hi);
            }
            *a = v;
        });
    }
    Ok(adv)
}

/// Noise standard deviation as a fraction of the input range, per severity.
pub const NOISE_FRACTION: f64 = 0.04;
pub const MAX_SEVERITY: u8 = 5;

/// Unclipped noise with standard deviation `std`; row `i` draws from its
/// own stream keyed by `(seed, i)`.
pub fn gaussian_noise(rows: usize, cols: usize, std: f64, seed: u64) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let mut rng = rng_for(seed, &format!("noise-row/{i}"));
        row.mapv_inplace(|_| std * rng.sample::<f64, _>(StandardNormal));
    }
    out
}

/// Adds noise with standard deviation `severity * 0.04 * (hi - lo)` and
/// clips to `[lo, hi]`.
pub fn noise_corruption(x: &Array2<f64>, severity: u8, bounds: (f64, f64), seed: u64) -> Result<Array2<f64>> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(Error::Range(format!(
            "severity {severity} outside 1..={MAX_SEVERITY}"
        )));
    }
    let (lo, hi) = bounds;
    if hi.is_nan() || lo.is_nan() || hi <= lo {
        return Err(Error::Range(format!("empty input range [{lo}, {hi}]")));
    }
    let std = f64::from(severity) * NOISE_FRACTION * (hi - lo);
    let noise = gaussian_noise(x.nrows(), x.ncols(), std, seed);
    Ok((x + &noise).mapv(|v| v.clamp(lo, hi)))
}
