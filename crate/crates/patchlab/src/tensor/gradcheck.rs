//! Finite-difference gradient verification.
//!
//! The checker only ever calls the forward pass, so it stays independent of
//! the backward implementation it validates. Central differences:
//! (f(x+h) − f(x−h)) / 2h.

use super::{Element, ParamStore};
use crate::error::Result;

/// Worst observed disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Relative error with a floor so that true-zero gradients compare cleanly.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compare analytic parameter gradients against central finite differences.
///
/// `loss` must be a pure function of the store contents. `analytic` holds
/// dloss/dparam in registry order (as produced by `harvest_grads`).
/// `stride` samples every n-th element of each parameter (1 = exhaustive).
pub fn check_param_grads<E, F>(
    params: &mut ParamStore<E>,
    analytic: &[Vec<E>],
    mut loss: F,
    h: f64,
    stride: usize,
) -> Result<GradReport>
where
    E: Element,
    F: FnMut(&ParamStore<E>) -> Result<f64>,
{
    assert_eq!(analytic.len(), params.len());
    let stride = stride.max(1);
    let mut report = GradReport::default();
    for id in 0..params.len() {
        let n = params.get(id).data.len();
        let mut i = 0;
        while i < n {
            let orig = params.get(id).data[i];
            params.get_mut(id).data[i] = E::from_f64(orig.to_f64() + h);
            let up = loss(params)?;
            params.get_mut(id).data[i] = E::from_f64(orig.to_f64() - h);
            let down = loss(params)?;
            params.get_mut(id).data[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[id][i].to_f64();
            let e = rel_err(a, numeric);
            if e > report.max_rel_err {
                report.max_rel_err = e;
            }
            report.checked += 1;
            i += stride;
        }
    }
    Ok(report)
}

/// Central finite differences of a plain vector function (for op-level
/// tests that do not involve a parameter store).
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; x.len()];
    let mut xs = x.to_vec();
    for i in 0..x.len() {
        let orig = xs[i];
        xs[i] = orig + h;
        let up = f(&xs);
        xs[i] = orig - h;
        let down = f(&xs);
        xs[i] = orig;
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}
