//! Central finite-difference verification of tape gradients.
//!
//! The caller runs its forward/backward pass, leaves the analytic gradients
//! in the store's gradient slots, and hands the same forward computation here
//! as a value-level closure. Each parameter entry is then perturbed by
//! +/- epsilon and the numeric slope is compared against the analytic one.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};

use crate::error::{CoreError, Result};
use crate::fmath;
use crate::params::ParameterStore;

pub const EPSILON_MIN: f64 = 1e-7;
pub const EPSILON_MAX: f64 = 1e-3;
pub const DEFAULT_EPSILON: f64 = 1e-5;

/// Relative error with an absolute floor, so near-zero pairs compare sanely.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let scale = fmath::abs(a).max(fmath::abs(b)).max(1e-8);
    fmath::abs(a - b) / scale
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub max_rel_err: f64,
    /// Flat index of the worst entry, with both slopes kept for reporting.
    pub worst_index: usize,
    pub numeric: f64,
    pub analytic: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FdReport {
    pub per_param: BTreeMap<String, ParamCheck>,
}

impl FdReport {
    pub fn max_rel_err(&self) -> f64 {
        self.per_param
            .values()
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, &ParamCheck)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
            .map(|(k, v)| (k.as_str(), v))
    }
}

/// Checks every entry of every parameter. `f` must be a pure function of the
/// store; the analytic gradients are read from the store's gradient slots.
/// The store is restored bit-exactly before returning.
pub fn finite_difference_check<F>(
    f: F,
    params: &mut ParameterStore,
    epsilon: f64,
) -> Result<FdReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if !(EPSILON_MIN..=EPSILON_MAX).contains(&epsilon) {
        return Err(CoreError::Config(format!(
            "finite-difference epsilon {epsilon} outside [{EPSILON_MIN}, {EPSILON_MAX}]"
        )));
    }
    let names: alloc::vec::Vec<String> =
        params.names().iter().map(|s| s.to_string()).collect();
    let mut report = FdReport::default();

    for name in &names {
        let analytic = params.grad(name)?.clone();
        let numel = analytic.numel();
        let mut check = ParamCheck {
            max_rel_err: 0.0,
            worst_index: 0,
            numeric: 0.0,
            analytic: 0.0,
        };
        for idx in 0..numel {
            let orig = params.get(name)?.data()[idx];
            params.get_mut(name)?.data_mut()[idx] = orig + epsilon;
            let up = eval_probe(&f, params, name, idx)?;
            params.get_mut(name)?.data_mut()[idx] = orig - epsilon;
            let down = eval_probe(&f, params, name, idx)?;
            params.get_mut(name)?.data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * epsilon);
            let a = analytic.data()[idx];
            let err = relative_error(numeric, a);
            if err > check.max_rel_err {
                check.max_rel_err = err;
                check.worst_index = idx;
                check.numeric = numeric;
                check.analytic = a;
            }
        }
        report.per_param.insert(name.clone(), check);
    }
    Ok(report)
}

fn eval_probe<F>(f: &F, params: &ParameterStore, name: &str, idx: usize) -> Result<f64>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    let v = f(params)
        .map_err(|e| CoreError::Eval(format!("probe at {name:?}[{idx}]: {e}")))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(CoreError::Eval(format!(
            "probe at {name:?}[{idx}] returned a non-finite value"
        )))
    }
}
