//! Central finite-difference verification of analytic gradients.

use crate::error::{KmtrError, Result};

use super::graph::{Graph, Var};
use super::params::ParameterStore;

/// Denominator floor for the relative error, so vanishing gradients are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub worst: Option<(String, usize)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares gradients of the scalar built by `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every scalar of every parameter in `store`.
pub fn grad_check<F>(store: &ParameterStore, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParameterStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(&mut g, store)?;
    let grads = g.backward(out);
    let analytic = g.param_grads(&grads);
    for (name, gm) in &analytic {
        if gm.iter().any(|v| !v.is_finite()) {
            return Err(KmtrError::NonFinite(format!("gradient of `{name}`")));
        }
    }
    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new();
        let v = f(&mut g, s)?;
        Ok(g.scalar(v))
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, checked: 0, worst: None };
    let mut probe = store.clone();
    for name in store.names() {
        let n = store.get(&name).expect("name").len();
        for i in 0..n {
            let orig = store.get(&name).unwrap().as_slice().expect("standard layout")[i];
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(&name).unwrap().as_slice_mut().unwrap()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(&name).map(|m| m.as_slice().unwrap()[i]).unwrap_or(0.0);
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
