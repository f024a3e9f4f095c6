use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Precision, Tensor};

/// Denominator floor of the relative error, so that coordinates whose true
/// gradient is ~0 are judged on absolute error instead of noise. Central
/// differences of an O(10) loss at step 1e-5 carry round-off near 1e-10.
pub const REL_ERR_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat element index) of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Which coordinates to perturb.
#[derive(Clone, Copy, Debug)]
pub enum Probe {
    All,
    /// At most `per_input` randomly chosen elements of every input.
    Sample { per_input: usize, seed: u64 },
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of a scalar function built on a fresh graph against
/// central differences with the given step.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    grad_check_many(f, std::slice::from_ref(x), Probe::All, step, tol)
}

pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    probe: Probe,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let graph = Graph::new(Precision::Verification);
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| graph.leaf(t.clone(), true)).collect();
    let loss = f(&graph, &vars)?;
    let grads = graph.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|v| grads.get(*v).expect("tracked leaf"))
        .collect();
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new(Precision::Verification);
        let vs: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vs)?.value().item())
    };
    compare_with_finite_differences(inputs, &analytic, eval, probe, step, tol)
}

/// Central-difference comparison for an arbitrary scalar evaluator.
///
/// `eval` is called twice at the unperturbed point first; differing results
/// mean the function is not deterministic and the check is refused.
pub fn compare_with_finite_differences(
    inputs: &[Tensor],
    analytic: &[Tensor],
    mut eval: impl FnMut(&[Tensor]) -> Result<f64>,
    probe: Probe,
    step: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if inputs.len() != analytic.len() {
        return Err(Error::invalid("one analytic gradient per input required"));
    }
    let base = eval(inputs)?;
    let again = eval(inputs)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::GradCheck(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (which, (input, grad)) in inputs.iter().zip(analytic).enumerate() {
        if input.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "grad_check",
                lhs: input.shape().to_vec(),
                rhs: grad.shape().to_vec(),
            });
        }
        let indices: Vec<usize> = match probe {
            Probe::All => (0..input.len()).collect(),
            Probe::Sample { per_input, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (which as u64).wrapping_mul(0x9E37));
                let n = per_input.min(input.len());
                let mut idx = sample(&mut rng, input.len(), n).into_vec();
                idx.sort_unstable();
                idx
            }
        };
        for i in indices {
            let orig = input.data()[i];
            work[which].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = rel_err(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = err;
                report.worst = (which, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err < tol;
    Ok(report)
}
