//! Central finite-difference verification of tape gradients.
//!
//! The checked function is replayed on an `f64` tape: the op code is the same
//! as in training, and double precision keeps the difference quotient's
//! roundoff far below the tolerances in use.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (input index, flat element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub tol: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Relative error with an absolute floor, so exact zeros compare as equal.
pub fn rel_error(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-9 {
        (a - b).abs()
    } else {
        (a - b).abs() / scale
    }
}

/// Compares tape gradients of `sum(f(inputs))` against central differences.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&eps) {
        return Err(Error::Input(format!(
            "grad_check eps {eps} outside [1e-4, 1e-2]"
        )));
    }
    let eval = |values: &[Vec<f64>]| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let vars = bind(&mut tape, inputs, values, false)?;
        let out = f(&mut tape, &vars)?;
        let s = tape.sum(out)?;
        Ok(tape.item(s))
    };

    let base: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect();

    let mut tape = Tape::<f64>::new();
    let vars = bind(&mut tape, inputs, &base, true)?;
    let out = f(&mut tape, &vars)?;
    let s = tape.sum(out)?;
    let grads = tape.backward(s)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        tol,
        checked: 0,
    };
    let mut probe = base.clone();
    for (i, v) in vars.iter().enumerate() {
        let zeros = vec![0.0; base[i].len()];
        let analytic = grads.raw(*v).unwrap_or(&zeros);
        for j in 0..base[i].len() {
            let a = analytic[j];
            if !a.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at input {i}, element {j}"
                )));
            }
            probe[i][j] = base[i][j] + eps;
            let plus = eval(&probe)?;
            probe[i][j] = base[i][j] - eps;
            let minus = eval(&probe)?;
            probe[i][j] = base[i][j];
            let numeric = (plus - minus) / (2.0 * eps);
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((i, j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}

fn bind(
    tape: &mut Tape<f64>,
    inputs: &[Tensor],
    values: &[Vec<f64>],
    grad: bool,
) -> Result<Vec<Var>> {
    inputs
        .iter()
        .zip(values)
        .map(|(t, v)| {
            if grad {
                tape.variable_from(t.shape(), v.clone())
            } else {
                tape.constant_from(t.shape(), v.clone())
            }
        })
        .collect()
}
