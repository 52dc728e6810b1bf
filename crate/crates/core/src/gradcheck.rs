//! Central finite differences against tape gradients, in 64-bit.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// Denominator floor of [`relative_error`]. Central differences at
/// `h = 1e-5` on an O(1) loss carry roundoff near 1e-11, so gradients much
/// below 1e-6 cannot be resolved relatively; under the floor the check is
/// absolute (`|a - n| < tol · 1e-6`).
pub const RELATIVE_FLOOR: f64 = 1e-6;

/// `|a - n| / max(RELATIVE_FLOOR, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / f64::max(RELATIVE_FLOOR, analytic.abs() + numeric.abs())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub probes: Vec<ProbeResult>,
    pub max_rel_error: f64,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compare tape gradients of the scalar built by `f` with central
/// differences of step `h`, at the given `(parameter, flat index)` probes.
///
/// `f` must be a pure function of the store's values.
pub fn grad_check<F>(
    store: &mut ParamStore<f64>,
    probes: &[(ParamId, usize)],
    h: f64,
    tol: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    let mut grads = store.clone();
    grads.zero_grad();
    tape.accumulate_param_grads(&mut grads);

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut t = Tape::inference();
        let v = f(&mut t, store)?;
        Ok(t.value(v).data()[0])
    };

    let mut results = Vec::with_capacity(probes.len());
    for &(id, idx) in probes {
        let orig = store.value(id).data()[idx];
        store.value_mut(id).data_mut()[idx] = orig + h;
        let plus = eval(store)?;
        store.value_mut(id).data_mut()[idx] = orig - h;
        let minus = eval(store)?;
        store.value_mut(id).data_mut()[idx] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.grad(id)[idx];
        results.push(ProbeResult {
            param: store.name(id).into(),
            index: idx,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = results.iter().map(|p| p.rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        probes: results,
        max_rel_error,
        tol,
        passed: max_rel_error < tol,
    })
}

/// Every scalar of every parameter.
pub fn all_probes(store: &ParamStore<f64>) -> Vec<(ParamId, usize)> {
    store
        .ids()
        .flat_map(|id| (0..store.value(id).numel()).map(move |i| (id, i)))
        .collect()
}

/// `per_param` random indices from each parameter whose name passes `filter`.
pub fn sample_probes<R: Rng>(
    store: &ParamStore<f64>,
    per_param: usize,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) -> Vec<(ParamId, usize)> {
    let mut out = Vec::new();
    for id in store.ids() {
        if !filter(store.name(id)) {
            continue;
        }
        let n = store.value(id).numel();
        for _ in 0..per_param.min(n) {
            out.push((id, rng.random_range(0..n)));
        }
    }
    out
}
