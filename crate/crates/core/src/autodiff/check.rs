use crate::error::{Error, Result};
use crate::numerics::Matrix;

use super::tape::{Tape, Var};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst relative error per parameter, in input order.
    pub max_rel_error: Vec<f64>,
    pub tol: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.max_rel_error.iter().cloned().fold(0.0, f64::max)
    }
}

/// Compares the tape gradient of `f` with central finite differences of step `h`.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1)`, so
/// gradients near zero are compared absolutely.
pub fn grad_check<F>(f: F, params: &[Matrix], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Contract(format!("finite-difference step {h} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Matrix]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|m| tape.param(m.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut work: Vec<Matrix> = params.to_vec();
    let mut max_rel_error = Vec::with_capacity(params.len());
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, params[pi].shape());
        let mut worst: f64 = 0.0;
        for k in 0..params[pi].data().len() {
            let orig = work[pi].data()[k];
            work[pi].data_mut()[k] = orig + h;
            let up = eval(&work)?;
            work[pi].data_mut()[k] = orig - h;
            let down = eval(&work)?;
            work[pi].data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
            worst = worst.max(rel);
        }
        max_rel_error.push(worst);
    }
    let passed = max_rel_error.iter().all(|e| *e < tol);
    Ok(GradCheckReport {
        max_rel_error,
        tol,
        passed,
    })
}
