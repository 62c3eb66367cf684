//! Central finite-difference oracle for tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Per-tensor outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Maximum relative error for each parameter tensor, in input order.
    pub per_param: Vec<f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.iter().copied().fold(0.0, f64::max)
    }
}

/// Relative discrepancy used throughout: `|a − n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p)).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.numel() != 1 {
        return Err(Error::arg(format!("objective must be scalar, got {:?}", value.shape())));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {v}")));
    }
    Ok(v)
}

/// Analytic gradients of `f` at `params` via one backward pass.
pub fn analytic_gradient<F>(f: &F, params: &[Tensor]) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    Ok(vars.iter().map(|&v| grads.get(v)).collect())
}

/// Central-difference gradient `(f(x+h) − f(x−h)) / 2h`, one coordinate at a time.
pub fn numerical_gradient<F>(f: &F, params: &[Tensor], h: f64) -> Result<Vec<Tensor>>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::arg(format!("finite-difference step must be positive, got {h}")));
    }
    let mut work: Vec<Tensor> = params.iter().map(Tensor::detached).collect();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for k in 0..params[p].numel() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + h;
            let plus = evaluate(f, &work)?;
            work[p].data_mut()[k] = orig - h;
            let minus = evaluate(f, &work)?;
            work[p].data_mut()[k] = orig;
            g.data_mut()[k] = (plus - minus) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Compares two gradient sets coordinate by coordinate.
pub fn compare_gradients(analytic: &[Tensor], numeric: &[Tensor]) -> Result<GradCheckReport> {
    if analytic.len() != numeric.len() {
        return Err(Error::dim("compare_gradients", &[analytic.len()], &[numeric.len()]));
    }
    let mut per_param = Vec::with_capacity(analytic.len());
    for (a, n) in analytic.iter().zip(numeric) {
        if a.shape() != n.shape() {
            return Err(Error::dim("compare_gradients", a.shape(), n.shape()));
        }
        let worst = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(&x, &y)| relative_error(x, y))
            .fold(0.0, f64::max);
        per_param.push(worst);
    }
    Ok(GradCheckReport { per_param })
}

/// Checks tape gradients of `f` against central finite differences with step `h`.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&mut Tape<'t>, &[Var]) -> Result<Var>,
{
    let numeric = numerical_gradient(&f, params, h)?;
    let analytic = analytic_gradient(&f, params)?;
    compare_gradients(&analytic, &numeric)
}
