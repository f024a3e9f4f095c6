use super::params::{ParamStore, Session};
use crate::autodiff::{compare_with_finite_differences, GradCheckReport, Probe, Var};
use crate::error::Result;
use crate::tensor::{Precision, Tensor};

/// Finite-difference check of every parameter gradient of a scalar loss.
///
/// `loss` must not draw randomness (no dropout sessions are created).
/// Parameters the loss never reads must have zero numeric gradient.
pub fn check_param_grads<F>(store: &ParamStore, loss: F, probe: Probe, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'s, 'p> Fn(&'s Session<'p>) -> Result<Var<'s>>,
{
    let session = Session::tracking(store, Precision::Verification);
    let l = loss(&session)?;
    let grads = session.graph().backward(l)?;
    let analytic: Vec<Tensor> = session
        .param_grads(&grads)
        .into_iter()
        .zip(store.values())
        .map(|(g, v)| g.unwrap_or_else(|| Tensor::zeros(v.shape())))
        .collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let perturbed = store.with_values(xs.to_vec())?;
        let s = Session::eval(&perturbed, Precision::Verification);
        Ok(loss(&s)?.value().item())
    };
    compare_with_finite_differences(store.values(), &analytic, eval, probe, step, tol)
}
