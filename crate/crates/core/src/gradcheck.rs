//! Central finite-difference gradient checking.
//!
//! The check only evaluates forward passes, so it is independent of every
//! backward closure it verifies.

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-6;

/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares tape gradients of the scalar `f(inputs)` against central
/// differences for every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], f: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    check_gradients_sampled(inputs, usize::MAX, f)
}

/// Like [`check_gradients`] but probes at most `per_input` evenly spaced
/// elements of each input.
pub fn check_gradients_sampled<F>(inputs: &[Tensor], per_input: usize, f: F) -> GradReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| grads.get_or_zeros(v, &tape))
        .collect();

    let eval = |probe: &[Tensor]| -> f64 {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item()
    };

    let mut report = GradReport::default();
    let mut probe = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = n.div_ceil(per_input.min(n).max(1));
        for j in (0..n).step_by(stride.max(1)) {
            let orig = input.data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&probe);
            probe[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (i, j);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    report
}
