use alloc::vec::Vec;

use rand::Rng;

use super::blocks::{Ctx, Linear};
use crate::error::Result;
use crate::params::ParamStore;
use crate::tape::Var;
use crate::tensor::{Scalar, Tensor};

/// `f_i = 10000^(-2i/dim)` for `i < dim/2`.
pub fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|i| libm::pow(10000.0, -2.0 * i as f64 / dim as f64))
        .collect()
}

/// `[sin(t·f_0), …, sin(t·f_{d/2-1}), cos(t·f_0), …]`.
pub fn sinusoidal(t: usize, dim: usize) -> Vec<f64> {
    let f = frequencies(dim);
    let mut out = Vec::with_capacity(dim);
    out.extend(f.iter().map(|&w| libm::sin(t as f64 * w)));
    out.extend(f.iter().map(|&w| libm::cos(t as f64 * w)));
    out
}

/// Sinusoidal features followed by `Linear → SiLU → Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeEmbedding {
    dim: usize,
    fc1: Linear,
    fc2: Linear,
}

impl TimeEmbedding {
    pub fn register<E: Scalar, R: Rng>(store: &mut ParamStore<E>, dim: usize, rng: &mut R) -> Self {
        Self {
            dim,
            fc1: Linear::register(store, "time.fc1", dim, dim, rng),
            fc2: Linear::register(store, "time.fc2", dim, dim, rng),
        }
    }

    /// `[1 × dim]` embedding of step `t`.
    pub fn forward<E: Scalar>(&self, ctx: &mut Ctx<E>, t: usize) -> Result<Var> {
        let s = Tensor::from_f64(&[1, self.dim], &sinusoidal(t, self.dim))?;
        let s = ctx.tape.constant(s)?;
        let h = self.fc1.forward(ctx, s)?;
        let h = ctx.tape.silu(h)?;
        self.fc2.forward(ctx, h)
    }
}
