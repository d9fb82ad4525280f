//! Central finite-difference gradient checks against the tape.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub input: usize,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub coords_checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor], track: bool) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), track)).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::Contract("gradient check needs a scalar function".into()));
    }
    Ok((tape, vars, out))
}

/// Compares tape gradients of the scalar function `f` with central differences
/// `(f(x + h) - f(x - h)) / 2h` for every coordinate of every input.
///
/// `f` must be deterministic: it is re-evaluated twice per coordinate.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (mut tape, vars, out) = eval_scalar(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf tracks grad").to_vec())
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        input: 0,
        coord: 0,
        analytic: 0.0,
        numeric: 0.0,
        coords_checked: 0,
    };
    let mut probe = inputs.to_vec();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = probe[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let (t, _, o) = eval_scalar(&f, &probe, false)?;
            let plus = t.value(o).data()[0];
            probe[i].data_mut()[j] = orig - step;
            let (t, _, o) = eval_scalar(&f, &probe, false)?;
            let minus = t.value(o).data()[0];
            probe[i].data_mut()[j] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err || report.coords_checked == 1 {
                report = GradCheckReport {
                    max_rel_err: err,
                    input: i,
                    coord: j,
                    analytic: a,
                    numeric,
                    coords_checked: report.coords_checked,
                };
            }
        }
    }
    Ok(report)
}

/// Single-input convenience form of [`check_gradients`]; returns the max relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    check_gradients(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)
        .map(|r| r.max_rel_err)
}
