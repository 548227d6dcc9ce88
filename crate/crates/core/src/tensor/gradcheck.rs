use super::{Graph, Tensor4, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    /// Largest per-input relative error `‖a - n‖∞ / max(‖a‖∞, ‖n‖∞)`, with
    /// `a` the analytic and `n` the numeric gradient of one input tensor.
    pub max_rel_err: f64,
    /// Largest coordinate-wise `|a - n| / max(|a|, |n|, 1e-8)`. Coordinates
    /// whose gradient is near the finite-difference noise floor dominate it.
    pub max_elementwise_rel_err: f64,
    /// Input tensor attaining `max_rel_err`.
    pub worst_input: usize,
    /// Flat index of the largest `|a - n|` inside that tensor.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

fn eval<F>(f: &F, inputs: &[Tensor4]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    if g.shape(out) != [1, 1, 1, 1] {
        return Err(Error::invalid("grad_check function must return a scalar"));
    }
    Ok(g.scalar(out))
}

/// Compares reverse-mode gradients of the scalar function `f` against
/// central differences `(f(x+δ) - f(x-δ)) / 2δ` on every input coordinate.
pub fn grad_check<F>(f: F, inputs: &[Tensor4], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::invalid("grad_check step must be positive"));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_elementwise_rel_err: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor4> = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(v, inputs[i].shape());
        let (mut diff, mut scale, mut at) = (0.0f64, 0.0f64, (0, 0.0, 0.0));
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            probe[i].data_mut()[j] = x0 + step;
            let fp = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0 - step;
            let fm = eval(&f, &probe)?;
            probe[i].data_mut()[j] = x0;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic.data()[j];
            let d = (a - numeric).abs();
            scale = scale.max(a.abs()).max(numeric.abs());
            if d > diff || j == 0 {
                diff = d;
                at = (j, a, numeric);
            }
            let rel = d / a.abs().max(numeric.abs()).max(1e-8);
            report.max_elementwise_rel_err = report.max_elementwise_rel_err.max(rel);
        }
        let rel = if scale > 0.0 { diff / scale } else { 0.0 };
        if rel > report.max_rel_err || i == 0 {
            report.max_rel_err = rel;
            report.worst_input = i;
            (report.worst_index, report.analytic, report.numeric) = at;
        }
    }
    Ok(report)
}
