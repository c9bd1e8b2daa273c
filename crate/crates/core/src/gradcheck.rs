//! Central finite-difference checking of tape gradients.

use crate::ad::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest |ad − fd| / max(1, |ad|, |fd|) over all checked entries.
    pub max_rel_err: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub entries: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares reverse-mode gradients of a scalar function of `inputs` against
/// central differences with step `h`. `build` must add the computation to the
/// tape and return the 1×1 output; it is re-run for every perturbation.
pub fn check_gradients<F>(inputs: &[Tensor], h: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = build(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport { max_rel_err: 0.0, worst: (0, 0), entries: 0 };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let ad = grads.wrt(*v);
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work)?;
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = ad.data()[e];
            let err = (a - fd).abs() / 1f64.max(a.abs()).max(fd.abs());
            report.entries += 1;
            if err > report.max_rel_err || !err.is_finite() {
                report.max_rel_err = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (i, e);
            }
        }
    }
    Ok(report)
}
