use super::{FreezeMask, Graph, NodeId};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamStore};

/// Gradient magnitude above which a 64-bit central difference with
/// `eps = 1e-5` resolves four significant digits for losses of order `ln V`.
pub const RESOLVABLE_MAGNITUDE: f64 = 1e-6;

/// Outcome of [`finite_diff_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Number of trainable coordinates compared. Frozen ones are skipped.
    pub checked: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    /// Analytic and central-difference values at the worst coordinate.
    pub worst_values: (f64, f64),
    /// Max relative error over coordinates with `max(|analytic|, |numeric|)`
    /// at least [`RESOLVABLE_MAGNITUDE`].
    pub max_rel_error_resolvable: f64,
    /// Max absolute error over the remaining, smaller coordinates.
    pub max_abs_error_unresolvable: f64,
}

fn eval_loss<B>(build: &B, store: &ParamStore<f64>, mask: &FreezeMask) -> Result<f64>
where
    B: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let bound = store.bind(&mut g, mask)?;
    let loss = build(&mut g, &bound)?;
    Ok(g.value(loss).item())
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences `(f(x+eps) - f(x-eps)) / 2eps` for every trainable
/// coordinate of `store`. Relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<B>(
    build: B,
    store: &ParamStore<f64>,
    mask: &FreezeMask,
    epsilon: f64,
) -> Result<FiniteDiffReport>
where
    B: Fn(&mut Graph<f64>, &Bindings) -> Result<NodeId>,
{
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be positive"));
    }
    let analytic = {
        let mut g = Graph::new();
        let bound = store.bind(&mut g, mask)?;
        let loss = build(&mut g, &bound)?;
        g.backward(loss)?
    };

    let mut work = store.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
        max_rel_error_resolvable: 0.0,
        max_abs_error_unresolvable: 0.0,
    };
    let names: Vec<String> = mask.trainable_names().map(str::to_string).collect();
    for name in names {
        let grad = analytic
            .get(&name)
            .ok_or_else(|| Error::UnknownParam(name.clone()))?
            .clone();
        for i in 0..grad.len() {
            let orig = work.get(&name)?.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + epsilon;
            let plus = eval_loss(&build, &work, mask)?;
            work.get_mut(&name)?.data_mut()[i] = orig - epsilon;
            let minus = eval_loss(&build, &work, mask)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    op: "finite_diff_check",
                });
            }
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = grad.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if a.abs().max(numeric.abs()) >= RESOLVABLE_MAGNITUDE {
                report.max_rel_error_resolvable = report.max_rel_error_resolvable.max(rel);
            } else {
                report.max_abs_error_unresolvable =
                    report.max_abs_error_unresolvable.max((a - numeric).abs());
            }
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), i));
                report.worst_values = (a, numeric);
            }
        }
    }
    Ok(report)
}
