//! Central finite-difference verification of analytic gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::graph::Gradients;
use crate::params::ParamStore;

/// Per-parameter worst relative error plus the single worst coordinate.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
    pub worst: Option<WorstCoordinate>,
}

#[derive(Clone, Debug)]
pub struct WorstCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.per_param.values().cloned().fold(0.0, f64::max)
    }

    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error() <= tolerance
    }
}

/// Relative error with the denominator floored at 1, so near-zero gradients
/// are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// Check analytic gradients of a deterministic scalar function against
/// central differences at step `h` (must lie in `[1e-6, 1e-4]`).
///
/// `f` evaluates the function; `grad_f` produces its analytic gradients at
/// the unperturbed point. `f` is evaluated twice up front and an evaluation
/// mismatch is reported as non-determinism.
pub fn finite_diff_check(
    f: &dyn Fn(&ParamStore) -> Result<f64>,
    grad_f: &dyn Fn(&ParamStore) -> Result<Gradients>,
    store: &ParamStore,
    h: f64,
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&h) {
        return Err(Error::Config(format!("step {h} outside [1e-6, 1e-4]")));
    }
    let base1 = f(store)?;
    let base2 = f(store)?;
    if base1.to_bits() != base2.to_bits() {
        return Err(Error::NonDeterministic(base1, base2));
    }

    let analytic = grad_f(store)?;
    let mut scratch = store.clone();
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut per_param = BTreeMap::new();
    let mut worst: Option<WorstCoordinate> = None;

    for name in &names {
        let numel = store.get(name).unwrap().numel();
        let ga = analytic.get(name).cloned();
        let mut max_err = 0.0f64;
        for i in 0..numel {
            let original = scratch.get(name).unwrap().data()[i];
            scratch.get_mut(name).unwrap().data_mut()[i] = original + h;
            let plus = f(&scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = original - h;
            let minus = f(&scratch)?;
            scratch.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * h);
            let analytic_i = ga.as_ref().map(|t| t.data()[i]).unwrap_or(0.0);
            let err = relative_error(analytic_i, numeric);
            if err > max_err {
                max_err = err;
            }
            if worst.as_ref().map(|w| err > w.rel_error).unwrap_or(true) {
                worst = Some(WorstCoordinate {
                    param: name.clone(),
                    index: i,
                    analytic: analytic_i,
                    numeric,
                    rel_error: err,
                });
            }
        }
        per_param.insert(name.clone(), max_err);
    }
    Ok(GradCheckReport { per_param, worst })
}
