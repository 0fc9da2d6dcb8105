//! Finite-difference verification of tape gradients.
//!
//! The function under test is evaluated in `f64`. Numeric derivatives use
//! central differences at `step` and `step / 2` combined by Richardson
//! extrapolation, which cancels the leading truncation term.

use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Denominator floor for relative errors, so entries whose true derivative
/// is zero are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub param: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_element: usize,
    pub tape_grad: f64,
    pub numeric_grad: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    pub max_rel_error: f64,
    /// Set when the check could not be carried out (non-finite values or an
    /// evaluation error); such a report never passes.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error <= self.tol
    }

    fn failed(tol: f64, why: String) -> Self {
        GradCheckReport {
            params: Vec::new(),
            tol,
            max_rel_error: f64::INFINITY,
            failure: Some(why),
        }
    }
}

fn eval<F>(f: &F, params: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().sum())
}

/// Compares tape gradients of the scalar `f(params)` against numeric
/// derivatives for every element of every parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor<f64>], step: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let picks: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |e| (i, e)))
        .collect();
    finite_diff_check_subset(f, params, step, tol, &picks)
}

/// Same as [`finite_diff_check`] restricted to `(param, element)` pairs.
pub fn finite_diff_check_subset<F>(
    f: F,
    params: &[Tensor<f64>],
    step: f64,
    tol: f64,
    picks: &[(usize, usize)],
) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let out = match f(&mut tape, &vars) {
        Ok(v) => v,
        Err(e) => return GradCheckReport::failed(tol, format!("forward failed: {e}")),
    };
    if !tape.value(out).all_finite() {
        return GradCheckReport::failed(tol, "non-finite function value".into());
    }
    let scalar = if tape.value(out).numel() == 1 {
        out
    } else {
        tape.sum(out)
    };
    let grads = match tape.backward(scalar) {
        Ok(g) => g,
        Err(e) => return GradCheckReport::failed(tol, format!("backward failed: {e}")),
    };
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
    if let Some(i) = analytic.iter().position(|g| !g.all_finite()) {
        return GradCheckReport::failed(tol, format!("non-finite tape gradient for parameter {i}"));
    }
    drop(tape);

    let mut reports: Vec<ParamCheck> = (0..params.len())
        .map(|i| ParamCheck {
            param: i,
            checked: 0,
            max_rel_error: 0.0,
            worst_element: 0,
            tape_grad: 0.0,
            numeric_grad: 0.0,
        })
        .collect();
    let mut work = params.to_vec();
    for &(pi, e) in picks {
        let x0 = work[pi].data()[e];
        let mut at = |dx: f64| -> Result<f64> {
            work[pi].data_mut()[e] = x0 + dx;
            let v = eval(&f, &work);
            work[pi].data_mut()[e] = x0;
            v
        };
        let central = |at: &mut dyn FnMut(f64) -> Result<f64>, h: f64| -> Result<f64> {
            Ok((at(h)? - at(-h)?) / (2.0 * h))
        };
        let numeric = match (central(&mut at, step), central(&mut at, step / 2.0)) {
            (Ok(d1), Ok(d2)) => (4.0 * d2 - d1) / 3.0,
            (Err(e), _) | (_, Err(e)) => {
                return GradCheckReport::failed(tol, format!("evaluation failed: {e}"))
            }
        };
        if !numeric.is_finite() {
            return GradCheckReport::failed(
                tol,
                format!("non-finite numeric derivative at parameter {pi}, element {e}"),
            );
        }
        let a = analytic[pi].data()[e];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        let r = &mut reports[pi];
        r.checked += 1;
        if rel > r.max_rel_error || r.checked == 1 {
            r.max_rel_error = r.max_rel_error.max(rel);
            if rel >= r.max_rel_error {
                r.worst_element = e;
                r.tape_grad = a;
                r.numeric_grad = numeric;
            }
        }
    }
    let max_rel_error = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    GradCheckReport {
        params: reports,
        tol,
        max_rel_error,
        failure: None,
    }
}
