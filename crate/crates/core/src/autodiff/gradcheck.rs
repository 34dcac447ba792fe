//! Central finite-difference gradient checking.

use crate::autodiff::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input, flat entry)` where the maximum occurred.
    pub worst: Option<(usize, usize)>,
    pub entries_checked: usize,
}

fn reduce(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    if tape.value(out).len() == 1 && tape.value(out).rank() == 0 {
        Ok(out)
    } else {
        tape.sum(out)
    }
}

fn evaluate<F>(op: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = op(&mut tape, &vars)?;
    let total = reduce(&mut tape, out)?;
    Ok(tape.value(total).data()[0])
}

/// Compares the tape's gradient of `sum(op(inputs))` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every entry of every input.
///
/// The relative error of an entry is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(op: F, inputs: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {step}")));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.detach().with_requires_grad(true))).collect();
    let out = op(&mut tape, &vars)?;
    let total = reduce(&mut tape, out)?;
    let grads = tape.backward(total)?;
    drop(tape);

    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, entries_checked: 0 };
    let mut probe: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach()).collect();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        for j in 0..inputs[i].len() {
            let original = inputs[i].data()[j];
            probe[i].data_mut()[j] = original + step;
            let plus = evaluate(&op, &probe)?;
            probe[i].data_mut()[j] = original - step;
            let minus = evaluate(&op, &probe)?;
            probe[i].data_mut()[j] = original;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference at input {i}, entry {j}: f(x+h)={plus}, f(x-h)={minus}"
                )));
            }
            if !analytic[j].is_finite() {
                return Err(Error::NonFinite(format!("analytic gradient at input {i}, entry {j} is {}", analytic[j])));
            }
            let numeric = (plus - minus) / (2.0 * step);
            let denom = analytic[j].abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic[j] - numeric).abs() / denom;
            report.entries_checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    Ok(report)
}
