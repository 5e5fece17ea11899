use super::{Grads, ParamStore};
use crate::error::Result;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub step: f64,
    /// Denominator floor of the relative error, so near-zero gradients are
    /// compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_per_param: Option<usize>,
    pub tolerance: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_per_param: None,
            tolerance: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub passed: bool,
}

/// Compares the analytic gradient returned by `f` against central finite
/// differences of its loss, parameter entry by parameter entry. Parameter
/// values are restored before returning.
pub fn gradient_check<F>(
    store: &mut ParamStore,
    f: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(f64, Grads)>,
{
    let f = std::cell::RefCell::new(f);
    gradient_check_split(
        store,
        |s| (f.borrow_mut())(s).map(|r| r.1),
        |s| (f.borrow_mut())(s).map(|r| r.0),
        opts,
    )
}

/// As [`gradient_check`], with the gradient and the loss computed by
/// separate closures so the many perturbed evaluations skip the backward
/// pass.
pub fn gradient_check_split<G, L>(
    store: &mut ParamStore,
    mut grad: G,
    mut f: L,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    G: FnMut(&ParamStore) -> Result<Grads>,
    L: FnMut(&ParamStore) -> Result<f64>,
{
    let grads = grad(store)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        passed: true,
    };
    for pi in 0..store.len() {
        let n = store.params()[pi].value.len();
        let picks: Vec<usize> = match opts.max_per_param {
            Some(m) if m < n => (0..m).map(|k| k * n / m).collect(),
            _ => (0..n).collect(),
        };
        for k in picks {
            let orig = store.params()[pi].value.data()[k];
            store.params_mut()[pi].value.data_mut()[k] = orig + opts.step;
            let lp = f(store)?;
            store.params_mut()[pi].value.data_mut()[k] = orig - opts.step;
            let lm = f(store)?;
            store.params_mut()[pi].value.data_mut()[k] = orig;

            let numeric = (lp - lm) / (2.0 * opts.step);
            let analytic = grads.by_index(pi)[k];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            if report.checked == 1 || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst_param = store.params()[pi].name.clone();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < opts.tolerance;
    Ok(report)
}
