//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// Worst disagreement found by [`grad_check`].
///
/// `max_rel_error` compares each parameter tensor as a whole:
/// `|a - n| / max(|a|, |n|, 1e-8)` with Euclidean norms over its entries.
/// The entry-wise maximum is kept for diagnosis; single entries whose true
/// gradient is far below the loss roundoff divided by `epsilon` make it
/// noisy without indicating a wrong derivative.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: Option<String>,
    /// Norm of the analytic gradient of `worst_param`.
    pub worst_param_grad_norm: f64,
    pub max_entry_rel_error: f64,
    pub worst_entry_param: Option<String>,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub entries_checked: usize,
    /// Entries whose step was shrunk to stay off a kink.
    pub refined_entries: usize,
}

fn rel_error(diff: f64, a: f64, n: f64) -> f64 {
    diff / a.max(n).max(1e-8)
}

/// Step halvings tried when a difference straddles a kink.
pub const MAX_REFINEMENTS: usize = 12;

fn evaluate<F>(store: &ParamStore, f: &mut F) -> Result<(f64, u64)>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (g, loss) = f(store)?;
    let v = g.value(loss).item();
    if !v.is_finite() {
        return Err(Error::TrainingFault(format!("non-finite loss {v} during gradient check")));
    }
    Ok((v, g.branch_signature()))
}

/// Central difference of entry `i` of `id`, shrinking the step while either
/// side takes a different branch of a relu or max than the base point.
/// Returns the derivative and whether the step had to shrink.
fn central_difference<F>(
    store: &mut ParamStore,
    build: &mut F,
    id: ParamId,
    i: usize,
    epsilon: f64,
    base: u64,
) -> Result<(f64, bool)>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let original = store.value(id).data()[i];
    let mut step = epsilon;
    let mut result = None;
    for attempt in 0..=MAX_REFINEMENTS {
        store.value_mut(id).data_mut()[i] = original + step;
        let plus = evaluate(store, build);
        store.value_mut(id).data_mut()[i] = original - step;
        let minus = evaluate(store, build);
        store.value_mut(id).data_mut()[i] = original;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        let derivative = (fp - fm) / (2.0 * step);
        if sp == base && sm == base {
            return Ok((derivative, attempt > 0));
        }
        result.get_or_insert(derivative);
        step /= 2.0;
    }
    // the base point sits on a kink; report the full-step secant
    Ok((result.expect("at least one attempt"), true))
}

/// Compare analytic gradients of every parameter entry against central
/// differences with step `epsilon`.
///
/// `build` must construct the loss deterministically (no dropout). A
/// difference whose two sides switch a relu or max relative to the base
/// point measures a secant across the kink rather than the derivative, so
/// its step is halved until both sides stay on the base point's piece.
pub fn grad_check<F>(store: &mut ParamStore, epsilon: f64, build: F) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check_params(store, epsilon, &ids, build)
}

/// [`grad_check`] restricted to `ids`.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    epsilon: f64,
    ids: &[ParamId],
    mut build: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let (analytic, base) = {
        let (g, loss) = build(store)?;
        if !g.value(loss).item().is_finite() {
            return Err(Error::TrainingFault("non-finite loss during gradient check".into()));
        }
        (g.backward(loss)?, g.branch_signature())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: None,
        worst_param_grad_norm: 0.0,
        max_entry_rel_error: 0.0,
        worst_entry_param: None,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        entries_checked: 0,
        refined_entries: 0,
    };
    for &id in ids {
        let n = store.value(id).len();
        let (mut diff_sq, mut a_sq, mut n_sq) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let (numeric, refined) = central_difference(store, &mut build, id, i, epsilon, base)?;
            report.refined_entries += usize::from(refined);
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            diff_sq += (a - numeric).powi(2);
            a_sq += a * a;
            n_sq += numeric * numeric;
            let err = rel_error((a - numeric).abs(), a.abs(), numeric.abs());
            report.entries_checked += 1;
            if err > report.max_entry_rel_error {
                report.max_entry_rel_error = err;
                report.worst_entry_param = Some(store.name(id).to_string());
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
        let err = rel_error(diff_sq.sqrt(), a_sq.sqrt(), n_sq.sqrt());
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = Some(store.name(id).to_string());
            report.worst_param_grad_norm = a_sq.sqrt();
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::tensor::Tensor;

    #[test]
    fn quadratic_loss_is_exact() {
        let mut store = ParamStore::new();
        store.add("theta", Tensor::vector(vec![0.3, -1.2, 2.5, 0.0]));
        let id = store.id("theta").unwrap();
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let t = g.param(s, id);
            let sq = g.mul(t, t)?;
            let total = g.sum(sq);
            let loss = g.scale(total, 0.5);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
        assert!(report.max_entry_rel_error < 1e-8, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn unused_parameter_has_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::vector(vec![1.0, 2.0]));
        let unused = store.add("unused", Tensor::vector(vec![3.0]));
        let mut g = Graph::new();
        let t = g.param(&store, used);
        let _ = g.param(&store, unused);
        let loss = g.sum(t);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(unused).map_or(0.0, |g| g[0]), 0.0);
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let t = g.param(s, used);
            let _ = g.param(s, unused);
            let loss = g.sum(t);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-8);
    }

    #[test]
    fn kink_inside_the_step_is_stepped_around() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![3e-6, -4e-6, 0.5]));
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let x = g.param(s, id);
            let r = g.relu(x);
            let loss = g.sum(r);
            Ok((g, loss))
        })
        .unwrap();
        assert_eq!(report.refined_entries, 2);
        assert!(report.max_entry_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn wrong_derivative_in_one_entry_is_caught() {
        // relu at exactly zero has a one-sided derivative, so a check there
        // disagrees with central differences by half the slope
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(vec![0.0, 1.0, 2.0, 3.0]));
        let report = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let x = g.param(s, id);
            let r = g.relu(x);
            let loss = g.sum(r);
            Ok((g, loss))
        })
        .unwrap();
        assert!(report.max_rel_error > 0.1, "{report:?}");
        assert_eq!(report.worst_index, 0);
    }

    #[test]
    fn non_finite_loss_is_a_fault() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(f64::INFINITY));
        let err = grad_check(&mut store, 1e-5, |s| {
            let mut g = Graph::new();
            let v = g.param(s, id);
            Ok((g, v))
        })
        .unwrap_err();
        assert!(err.is_numeric());
    }
}
