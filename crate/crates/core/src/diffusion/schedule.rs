use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Linear-beta noise schedule. Tables are `f64`; `alpha_bar(-1) = 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub betas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    pub sqrt_alpha_bars: Vec<f64>,
    pub sqrt_one_minus_alpha_bars: Vec<f64>,
}

pub const DEFAULT_STEPS: usize = 1000;
pub const DEFAULT_BETA_START: f64 = 1e-4;
pub const DEFAULT_BETA_END: f64 = 0.02;

impl Default for NoiseSchedule {
    fn default() -> Self {
        make_schedule(DEFAULT_STEPS, DEFAULT_BETA_START, DEFAULT_BETA_END).expect("default schedule is valid")
    }
}

/// `beta_t = beta_start + (beta_end - beta_start)·t/(T-1)`.
pub fn make_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 2 {
        return Err(Error::Invalid(format!("schedule needs at least 2 steps, got {steps}")));
    }
    if !(0.0 < beta_start && beta_start < beta_end && beta_end < 1.0) {
        return Err(Error::Invalid(format!(
            "betas must satisfy 0 < start < end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    let span = beta_end - beta_start;
    let last = (steps - 1) as f64;
    let betas: Vec<f64> = (0..steps)
        .map(|t| {
            if t == steps - 1 {
                beta_end
            } else {
                beta_start + span * (t as f64 / last)
            }
        })
        .collect();
    let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bars = Vec::with_capacity(steps);
    let mut prod = 1.0;
    for a in &alphas {
        prod *= a;
        alpha_bars.push(prod);
    }
    Ok(NoiseSchedule {
        sqrt_alpha_bars: alpha_bars.iter().map(|&a| libm::sqrt(a)).collect(),
        sqrt_one_minus_alpha_bars: alpha_bars.iter().map(|&a| libm::sqrt(1.0 - a)).collect(),
        betas,
        alphas,
        alpha_bars,
    })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `alpha_bar` at `t`, with `None` meaning the step before `0`.
    pub fn alpha_bar_at(&self, t: Option<usize>) -> f64 {
        t.map_or(1.0, |t| self.alpha_bars[t])
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::Invalid(format!("timestep {t} outside [0, {})", self.steps())))
        }
    }
}

/// `x_t = √ᾱ_t · x0 + √(1-ᾱ_t) · eps`.
pub fn q_sample<E: Scalar>(x0: &Tensor<E>, t: usize, eps: &Tensor<E>, schedule: &NoiseSchedule) -> Result<Tensor<E>> {
    schedule.check_step(t)?;
    x0.check_same(eps, "q_sample")?;
    let a = schedule.sqrt_alpha_bars[t];
    let b = schedule.sqrt_one_minus_alpha_bars[t];
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| E::from_f64(a * x.to_f64() + b * e.to_f64()))
        .collect();
    Tensor::new(x0.shape(), data)
}
