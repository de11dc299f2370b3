//! Central finite-difference gradient checking.

use super::{Matrix, NodeId, ParamId, ParamStore, Tape};
use crate::error::Result;

/// Result of a gradient check over every tunable scalar.
#[derive(Debug, Clone)]
pub struct GradCheck {
    /// `max |analytic − numeric| / max(1, |numeric|)`
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares the analytic gradient returned by `f` against central
/// differences with step `h` for every tunable entry of `params`.
///
/// `f` returns the scalar value together with the gradient of each
/// parameter it touched; parameters it omits are treated as having zero
/// gradient.
pub fn finite_diff_check<F>(params: &ParamStore, h: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&ParamStore) -> Result<(f64, Vec<(ParamId, Matrix)>)>,
{
    let (_, analytic) = f(params)?;
    let mut probe = params.clone();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let tunable: Vec<ParamId> = params.tunable_ids().collect();
    for id in tunable {
        let grad = analytic
            .iter()
            .filter(|(pid, _)| *pid == id)
            .fold(None::<Matrix>, |acc, (_, g)| match acc {
                Some(mut a) => {
                    a.add_assign(g).expect("same parameter shape");
                    Some(a)
                }
                None => Some(g.clone()),
            });
        for k in 0..params.value(id).len() {
            let original = params.value(id).as_slice()[k];
            probe.value_mut(id).as_mut_slice()[k] = original + h;
            let (up, _) = f(&probe)?;
            probe.value_mut(id).as_mut_slice()[k] = original - h;
            let (down, _) = f(&probe)?;
            probe.value_mut(id).as_mut_slice()[k] = original;

            let numeric = (up - down) / (2.0 * h);
            let a = grad.as_ref().map_or(0.0, |g| g.as_slice()[k]);
            let err = (a - numeric).abs() / numeric.abs().max(1.0);
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((params.get(id).name.clone(), k));
            }
        }
    }
    Ok(report)
}

/// Builds an objective for [`finite_diff_check`] from a graph builder that
/// returns a scalar node.
pub fn tape_objective<B>(build: B) -> impl Fn(&ParamStore) -> Result<(f64, Vec<(ParamId, Matrix)>)>
where
    B: Fn(&mut Tape, &ParamStore) -> Result<NodeId>,
{
    move |store: &ParamStore| {
        let mut tape = Tape::new();
        let out = build(&mut tape, store)?;
        let grads = tape.backward(out)?;
        Ok((tape.scalar(out), tape.param_grads(&grads)))
    }
}
