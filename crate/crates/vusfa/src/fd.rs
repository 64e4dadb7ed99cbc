//! Central finite-difference gradient checking.
//!
//! This is the oracle behind every gradient claim in the crate: perturb each
//! parameter coordinate by ±h, estimate the derivative, and compare with the
//! tape gradient. The loss closure must be deterministic — stochastic losses
//! have to fix their noise (see [`crate::noise::ReplayNoise`]) before being
//! checked, otherwise the difference quotient measures sampling noise, not
//! curvature.

use thiserror::Error;

use crate::tensor::{GradSet, ParamSet};

#[derive(Debug, Error)]
pub enum FdError {
    #[error("loss is not deterministic: two identical evaluations gave {0} and {1}")]
    NonDeterministic(f64, f64),
    #[error("gradient set has {grads} blocks, parameter set has {params}")]
    Misaligned { grads: usize, params: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    /// Central-difference step.
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            h: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FdReport {
    /// Worst scaled error over all coordinates; the check passes when this is
    /// ≤ `rel_tol`. Per coordinate the scaled error is
    /// `|fd - g| / max(|fd|, |g|, abs_tol / rel_tol)`, so acceptance is
    /// equivalent to `|fd - g| <= max(abs_tol, rel_tol * max(|fd|, |g|))`.
    pub max_scaled_err: f64,
    pub worst_param: String,
    pub worst_coord: usize,
    pub coords_checked: usize,
    pub rel_tol: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.max_scaled_err <= self.rel_tol
    }
}

/// Compare an analytic gradient against central finite differences of `f`.
///
/// `params` is restored to its original values before returning.
pub fn finite_difference_check(
    f: &mut dyn FnMut(&ParamSet) -> f64,
    params: &mut ParamSet,
    analytic: &GradSet,
    opts: FdOptions,
) -> Result<FdReport, FdError> {
    if analytic.len() != params.len() {
        return Err(FdError::Misaligned {
            grads: analytic.len(),
            params: params.len(),
        });
    }

    let base_a = f(params);
    let base_b = f(params);
    if base_a.to_bits() != base_b.to_bits() {
        return Err(FdError::NonDeterministic(base_a, base_b));
    }

    let mut report = FdReport {
        max_scaled_err: 0.0,
        worst_param: String::new(),
        worst_coord: 0,
        coords_checked: 0,
        rel_tol: opts.rel_tol,
    };
    let floor = opts.abs_tol / opts.rel_tol;

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for (block, name) in names.iter().enumerate() {
        let n = params.get(name).expect("name from iteration").len();
        for coord in 0..n {
            let original = params.get(name).unwrap().data()[coord];

            params.get_mut(name).unwrap().data_mut()[coord] = original + opts.h;
            let plus = f(params);
            params.get_mut(name).unwrap().data_mut()[coord] = original - opts.h;
            let minus = f(params);
            params.get_mut(name).unwrap().data_mut()[coord] = original;

            let fd = (plus - minus) / (2.0 * opts.h);
            let g = analytic.get(block).data()[coord];
            let scale = fd.abs().max(g.abs()).max(floor);
            let err = (fd - g).abs() / scale;
            report.coords_checked += 1;
            if err > report.max_scaled_err {
                report.max_scaled_err = err;
                report.worst_param = name.clone();
                report.worst_coord = coord;
            }
        }
    }
    Ok(report)
}
