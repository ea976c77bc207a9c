//! Central finite-difference gradient checking.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, coordinate)` of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub coords_checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares the graph gradient of a scalar-valued `op` with central
/// differences on every coordinate of every input.
///
/// Relative error is `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn grad_check<F>(op: F, inputs: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if step <= 0.0 {
        return Err(Error::InvalidArgument(
            "grad_check step must be positive".into(),
        ));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.constant(t.clone())).collect();
        let out = op(&mut g, &vars)?;
        g.value(out).item()
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = op(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape(format!(
            "grad_check needs a scalar output, got {:?}",
            g.value(out).shape()
        )));
    }
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        coords_checked: 0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads
            .get(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            probe[i].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[i].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
            report.coords_checked += 1;
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (i, j);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}
