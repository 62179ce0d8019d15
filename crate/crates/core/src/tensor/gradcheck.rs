use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Outcome of comparing reverse-mode gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Max relative error between the analytic gradient of the scalar function
/// `f` at `x` and central differences with step `1e-5·(1 + |xᵢ|)`.
pub fn grad_check<Fun>(f: Fun, x: &Tensor<f64>) -> Result<f64>
where
    Fun: for<'t> Fn(&'t Tape<f64>, Var<'t, f64>) -> Result<Var<'t, f64>>,
{
    let report = grad_check_multi(|tape, xs| f(tape, xs[0]), std::slice::from_ref(x), None)?;
    Ok(report.max_rel_error)
}

/// [`grad_check`] over several inputs at once. With `max_coords`, only that
/// many evenly spaced coordinates of each input are perturbed.
pub fn grad_check_multi<Fun>(f: Fun, inputs: &[Tensor<f64>], max_coords: Option<usize>) -> Result<GradCheckReport>
where
    Fun: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<_> = values.iter().map(|t| tape.leaf(t)).collect();
        let out = f(&tape, &vars)?;
        if out.numel() != 1 {
            return Err(Error::Argument(format!("grad_check: function returned shape {:?}", out.shape())));
        }
        Ok(out.item())
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs
            .iter()
            .map(|t| {
                let mut t = t.clone();
                t.set_requires_grad(true);
                tape.leaf(&t)
            })
            .collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let x0 = input.data()[i];
            let h = 1e-5 * (1.0 + x0.abs());
            work[k].data_mut()[i] = x0 + h;
            let fp = eval(&work)?;
            work[k].data_mut()[i] = x0 - h;
            let fm = eval(&work)?;
            work[k].data_mut()[i] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k][i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                report.worst_input = k;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
