use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::guidance::{cfg_predict, GuidanceConfig};
use super::model::{Conditioning, EpsModel};
use super::schedule::NoiseSchedule;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded};
use crate::tensor::{Scalar, Tensor};

/// Default number of sampling steps.
pub const DEFAULT_SAMPLING_STEPS: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Ddpm,
    Ddim,
}

impl SamplerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SamplerKind::Ddpm => "ddpm",
            SamplerKind::Ddim => "ddim",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ddpm" => Ok(SamplerKind::Ddpm),
            "ddim" => Ok(SamplerKind::Ddim),
            other => Err(Error::Invalid(format!("unknown sampler {other:?} (expected ddpm or ddim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub kind: SamplerKind,
    pub steps: usize,
    pub guidance: GuidanceConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            kind: SamplerKind::Ddim,
            steps: DEFAULT_SAMPLING_STEPS,
            guidance: GuidanceConfig::default(),
        }
    }
}

/// Ascending strided timesteps `i·T/steps`, `i < steps`.
pub fn timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::Invalid(format!("sampling steps must lie in [1, {total}], got {steps}")));
    }
    Ok((0..steps).map(|i| i * total / steps).collect())
}

/// `x̂0 = (x_t - √(1-ᾱ)·eps) / √ᾱ`.
pub fn predict_x0<E: Scalar>(x_t: &Tensor<E>, eps: &Tensor<E>, alpha_bar: f64) -> Result<Tensor<E>> {
    x_t.check_same(eps, "predict_x0")?;
    let (a, b) = (libm::sqrt(alpha_bar), libm::sqrt(1.0 - alpha_bar));
    let data = x_t
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| E::from_f64((x.to_f64() - b * e.to_f64()) / a))
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// One deterministic DDIM move from `alpha_bar` to `alpha_bar_prev`.
pub fn ddim_step<E: Scalar>(x_t: &Tensor<E>, eps: &Tensor<E>, alpha_bar: f64, alpha_bar_prev: f64) -> Result<Tensor<E>> {
    let x0 = predict_x0(x_t, eps, alpha_bar)?;
    let (a, b) = (libm::sqrt(alpha_bar_prev), libm::sqrt(1.0 - alpha_bar_prev));
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| E::from_f64(a * x.to_f64() + b * e.to_f64()))
        .collect();
    Tensor::new(x_t.shape(), data)
}

/// Ancestral mean and standard deviation for a move from `alpha_bar` to
/// `alpha_bar_prev`, with the effective `beta = 1 - ᾱ/ᾱ_prev`.
pub fn ddpm_coefficients(alpha_bar: f64, alpha_bar_prev: f64) -> (f64, f64, f64) {
    let beta = 1.0 - alpha_bar / alpha_bar_prev;
    let inv_sqrt_alpha = 1.0 / libm::sqrt(1.0 - beta);
    let eps_coef = beta / libm::sqrt(1.0 - alpha_bar);
    let var = beta * (1.0 - alpha_bar_prev) / (1.0 - alpha_bar);
    (inv_sqrt_alpha, eps_coef, libm::sqrt(var))
}

fn clamp_unit<E: Scalar>(x: Tensor<E>) -> Tensor<E> {
    let (lo, hi) = (-E::ONE, E::ONE);
    x.map(|v| if v < lo { lo } else if v > hi { hi } else { v })
}

fn check_steps(schedule: &NoiseSchedule, steps: usize) -> Result<Vec<usize>> {
    timesteps(schedule.steps(), steps)
}

/// Deterministic (`eta = 0`) DDIM over `steps` strided timesteps from
/// `x_T ~ N(0, I)` drawn with `seed`. The result is clamped to `[-1, 1]`.
pub fn ddim_sample<E: Scalar, M: EpsModel<E> + ?Sized>(
    model: &M,
    cond: &Conditioning<E>,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: &GuidanceConfig,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<E>> {
    let ts = check_steps(schedule, steps)?;
    let mut rng = seeded(seed);
    let mut x = normal_tensor::<E, _>(shape, &mut rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let eps = cfg_predict(model, &x, t, cond, guidance)?;
        let prev = (i > 0).then(|| ts[i - 1]);
        x = ddim_step(&x, &eps, schedule.alpha_bars[t], schedule.alpha_bar_at(prev))?;
    }
    Ok(clamp_unit(x))
}

/// Ancestral sampling over `steps` strided timesteps (`steps = T` is the
/// full chain). Draws `x_T` first, then one noise tensor per step except
/// the last. The result is clamped to `[-1, 1]`.
pub fn ddpm_sample<E: Scalar, M: EpsModel<E> + ?Sized>(
    model: &M,
    cond: &Conditioning<E>,
    schedule: &NoiseSchedule,
    steps: usize,
    guidance: &GuidanceConfig,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<E>> {
    let ts = check_steps(schedule, steps)?;
    let mut rng = seeded(seed);
    let mut x = normal_tensor::<E, _>(shape, &mut rng);
    for i in (0..ts.len()).rev() {
        let t = ts[i];
        let eps = cfg_predict(model, &x, t, cond, guidance)?;
        let prev = (i > 0).then(|| ts[i - 1]);
        let (inv_sqrt_alpha, eps_coef, sigma) = ddpm_coefficients(schedule.alpha_bars[t], schedule.alpha_bar_at(prev));
        let mean: Vec<E> = x
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&xv, &ev)| E::from_f64(inv_sqrt_alpha * (xv.to_f64() - eps_coef * ev.to_f64())))
            .collect();
        let mut next = Tensor::new(shape, mean)?;
        if i > 0 {
            let z = normal_tensor::<E, _>(shape, &mut rng);
            next = next.axpy(E::from_f64(sigma), &z)?;
        }
        x = next;
    }
    Ok(clamp_unit(x))
}

pub fn sample<E: Scalar, M: EpsModel<E> + ?Sized>(
    model: &M,
    cond: &Conditioning<E>,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
    shape: &[usize],
    seed: u64,
) -> Result<Tensor<E>> {
    match config.kind {
        SamplerKind::Ddim => ddim_sample(model, cond, schedule, config.steps, &config.guidance, shape, seed),
        SamplerKind::Ddpm => ddpm_sample(model, cond, schedule, config.steps, &config.guidance, shape, seed),
    }
}
