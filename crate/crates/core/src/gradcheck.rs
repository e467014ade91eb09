//! Central finite-difference verification of reverse-mode gradients.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::ParameterStore;

/// Below this magnitude gradients are compared absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// (parameter, element, analytic, numeric) at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tol
    }
}

/// Compares `Graph::backward` against central differences for every element
/// of every non-frozen parameter. `build` must be a pure function of the
/// store (fixed seeds for any sampling it does).
pub fn check_param_gradients<F>(store: &ParameterStore<f64>, build: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore<f64>) -> Result<(Graph<f64>, Var)>,
{
    let (g, loss) = build(store)?;
    let analytic = g.backward(loss, store)?;
    drop(g);

    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic.grads {
        for i in 0..grad.numel() {
            let orig = work.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + step;
            let (gp, lp) = build(&work)?;
            let up = gp.item(lp);
            work.get_mut(name)?.data_mut()[i] = orig - step;
            let (gm, lm) = build(&work)?;
            let down = gm.item(lm);
            work.get_mut(name)?.data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let a = grad.data()[i];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
    }
    Ok(report)
}
