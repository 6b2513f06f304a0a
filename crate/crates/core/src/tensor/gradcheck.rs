use alloc::vec::Vec;

use super::{Matrix, Tape, Var};
use crate::error::{bail, Result};

/// Compares tape gradients against central finite differences with step
/// `1e-5`. Returns the largest
/// `|analytic − numeric| / max(1e-8, |analytic|, |numeric|)` over every
/// entry of every parameter.
pub fn grad_check<F>(loss: F, params: &[Matrix]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    grad_check_with_step(loss, params, 1e-5)
}

pub fn grad_check_with_step<F>(loss: F, params: &[Matrix], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |ps: &[Matrix]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.constant(p.clone())).collect();
        let out = loss(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.var(p.clone())).collect();
    let out = loss(&mut tape, &vars);
    let base = tape.scalar(out);
    if !base.is_finite() {
        bail!(NonFinite, "loss at the check point");
    }
    let grads = tape.backward(out);

    let mut work: Vec<Matrix> = params.to_vec();
    let mut worst = 0.0f64;
    for (p, &v) in vars.iter().enumerate() {
        let analytic = grads.wrt(v);
        for idx in 0..work[p].as_slice().len() {
            let orig = work[p].as_slice()[idx];
            work[p].as_mut_slice()[idx] = orig + step;
            let up = eval(&work);
            work[p].as_mut_slice()[idx] = orig - step;
            let down = eval(&work);
            work[p].as_mut_slice()[idx] = orig;
            if !up.is_finite() || !down.is_finite() {
                bail!(NonFinite, "loss near parameter {} entry {}", p, idx);
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.as_slice()[idx];
            let rel = (a - numeric).abs() / 1e-8f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
