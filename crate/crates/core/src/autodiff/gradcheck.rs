//! Central-difference gradient checking.

use crate::error::{HocaError, Result};

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};

pub const DEFAULT_EPS: f64 = 1e-6;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
}

/// `|a − n| / max(|a|, |n|, 1)`. Below unit magnitude this is an absolute
/// error, so round-off in near-zero gradients does not dominate.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0)
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(Graph, Var, f64)>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = f(store, &mut g)?;
    let value = g.value(out).item()?;
    if !value.is_finite() {
        return Err(HocaError::Numeric(format!("checked function returned {value}")));
    }
    Ok((g, out, value))
}

/// Compares reverse-mode gradients of the scalar built by `f` against central
/// differences, coordinate by coordinate, over the parameters `ids`.
///
/// The store's gradients for `ids` are overwritten with the analytic values.
pub fn finite_diff_check<F>(store: &mut ParamStore, ids: &[ParamId], eps: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(HocaError::Argument(format!("finite-difference step must be positive, got {eps}")));
    }
    store.zero_grads();
    let (mut g, out, _) = evaluate(store, &f)?;
    g.backward(out, store)?;

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    for &id in ids {
        let analytic = store.get(id).grad.data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let original = store.get(id).value.data()[k];
            store.get_mut(id).value.data_mut()[k] = original + eps;
            let plus = evaluate(store, &f).map(|(_, _, v)| v);
            store.get_mut(id).value.data_mut()[k] = original - eps;
            let minus = evaluate(store, &f).map(|(_, _, v)| v);
            store.get_mut(id).value.data_mut()[k] = original;
            let numeric = (plus? - minus?) / (2.0 * eps);
            let err = relative_error(a, numeric);
            report.coordinates += 1;
            if err >= report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}
