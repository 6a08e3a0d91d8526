//! Central finite-difference verification of tape gradients.

use crate::error::{NumError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - fd| / max(1e-8, |fd|)` over all checked entries.
    pub max_rel_error: f64,
    pub checked: usize,
    /// `(parameter index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var<'_>> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let loss = f(&tape, &vars)?;
    let v = loss.value();
    if v.numel() != 1 {
        return Err(NumError::NonScalarLoss(v.shape().to_vec()));
    }
    Ok(v.item())
}

/// Compare tape gradients of the scalar objective `f` against central
/// differences with step `eps`, checking every element of every parameter.
pub fn finite_difference_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_difference_check_sampled(params, eps, usize::MAX, f)
}

/// Like [`finite_difference_check`] but checks at most `per_param` evenly
/// strided elements of each parameter.
pub fn finite_difference_check_sampled<F>(
    params: &[Tensor],
    eps: f64,
    per_param: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(NumError::InvalidStep(eps));
    }
    let first = evaluate(params, &f)?;
    let second = evaluate(params, &f)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumError::NonDeterministic { first, second });
    }

    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = f(&tape, &vars)?;
        let grads = tape.backward(loss)?;
        vars.iter().map(|v| grads.get_or_zeros(*v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        let n = param.numel();
        let stride = n.div_ceil(per_param.min(n)).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = param.data()[ei];
            work[pi].data_mut()[ei] = orig + eps;
            let plus = evaluate(&work, &f)?;
            work[pi].data_mut()[ei] = orig - eps;
            let minus = evaluate(&work, &f)?;
            work[pi].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let rel = (a - numeric).abs() / numeric.abs().max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
