use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Learning rate reported for the reference fine-tuning setup.
pub const REFERENCE_LR: f64 = 5e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: REFERENCE_LR,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Moment buffers for one [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState<E> {
    pub config: AdamWConfig,
    pub step: u64,
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
}

impl<E: Scalar> AdamWState<E> {
    pub fn new(config: AdamWConfig, store: &ParamStore<E>) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| vec![E::ZERO; store.value(id).numel()])
                .collect::<Vec<_>>()
        };
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam update from the gradients held in `store`.
///
/// The whole step is rejected before any parameter changes if a gradient is
/// non-finite or the moment buffers do not match the store.
pub fn adamw_step<E: Scalar>(store: &mut ParamStore<E>, state: &mut AdamWState<E>) -> Result<()> {
    let cfg = state.config;
    if !(cfg.lr > 0.0) {
        return Err(Error::Invalid(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    if state.m.len() != store.len() || state.v.len() != store.len() {
        return Err(Error::Shape {
            op: "adamw_step",
            lhs: vec![state.m.len()],
            rhs: vec![store.len()],
        });
    }
    for id in store.ids() {
        let n = store.value(id).numel();
        if state.m[id.index()].len() != n || state.v[id.index()].len() != n {
            return Err(Error::Shape {
                op: "adamw_step",
                lhs: vec![state.m[id.index()].len()],
                rhs: vec![n],
            });
        }
        if store.grad(id).iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(store.name(id).into()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - libm::pow(cfg.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(cfg.beta2, t as f64);
    let (b1, b2) = (E::from_f64(cfg.beta1), E::from_f64(cfg.beta2));
    let (one_b1, one_b2) = (E::from_f64(1.0 - cfg.beta1), E::from_f64(1.0 - cfg.beta2));
    let step_size = E::from_f64(cfg.lr / bc1);
    let inv_bc2 = E::from_f64(1.0 / bc2);
    let decay = E::from_f64(1.0 - cfg.lr * cfg.weight_decay);
    let eps = E::from_f64(cfg.eps);
    for id in store.ids() {
        let k = id.index();
        let grad = store.grad(id).to_vec();
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let theta = store.value_mut(id).data_mut();
        for i in 0..theta.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + one_b1 * g;
            v[i] = b2 * v[i] + one_b2 * g * g;
            let denom = (v[i] * inv_bc2).sqrt() + eps;
            theta[i] = theta[i] * decay - step_size * m[i] / denom;
        }
    }
    Ok(())
}
