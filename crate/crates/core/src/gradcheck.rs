//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Location and size of the worst disagreement found by [`grad_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of `f` against central differences
/// `(f(θ+eps) - f(θ-eps)) / 2eps` at every coordinate of every parameter.
///
/// `f` receives a fresh tape and one parameter node per entry of `params`,
/// and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_with_hook(params, eps, f, |_| {})
}

/// [`grad_check`] with a hook that may alter the analytic gradients before
/// comparison. Used to confirm the checker notices a broken gradient.
pub fn grad_check_with_hook<F, H>(
    params: &[Tensor],
    eps: f64,
    f: F,
    hook: H,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    H: FnOnce(&mut [Tensor]),
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Domain(format!(
            "finite-difference step {eps} outside [1e-7, 1e-3]"
        )));
    }
    let mut analytic = analytic_gradients(params, &f)?;
    hook(&mut analytic);

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.to_vec();
    for (pi, grad) in analytic.iter().enumerate() {
        for ci in 0..grad.len() {
            let orig = probe[pi].data()[ci];
            probe[pi].data_mut()[ci] = orig + eps;
            let plus = evaluate(&probe, &f)?;
            probe[pi].data_mut()[ci] = orig - eps;
            let minus = evaluate(&probe, &f)?;
            probe[pi].data_mut()[ci] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    what: format!("objective at parameter {pi}, coordinate {ci}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad.data()[ci], numeric);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

pub fn analytic_gradients<F>(params: &[Tensor], f: &F) -> Result<Vec<Tensor>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    let value = tape.scalar(loss)?;
    if !value.is_finite() {
        return Err(Error::NonFinite {
            what: "objective at the unperturbed point".into(),
        });
    }
    let grads = tape.backward(loss)?;
    Ok(vars.iter().map(|&v| grads.wrt(v).clone()).collect())
}

fn evaluate<F>(params: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let loss = f(&mut tape, &vars)?;
    tape.scalar(loss)
}
