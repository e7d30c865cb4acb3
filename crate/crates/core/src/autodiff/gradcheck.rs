//! Central finite-difference gradient checking.
//!
//! The numeric side only ever re-runs the forward closure on perturbed
//! inputs, so it shares nothing with the backward implementations.

use super::graph::{Graph, Var};
use crate::error::{PctError, Result};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradients below this magnitude are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst entry.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares the analytic gradient of `f(inputs)` (a scalar) with central
/// differences of step `step` on every element of every input.
pub fn check<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = perturbed.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[ti].numel()]);
        for ei in 0..inputs[ti].numel() {
            let base = inputs[ti].data()[ei];
            work[ti].data_mut()[ei] = base + step;
            let plus = eval(&work)?;
            work[ti].data_mut()[ei] = base - step;
            let minus = eval(&work)?;
            work[ti].data_mut()[ei] = base;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[ei];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(PctError::Numeric("non-finite gradient in check".into()));
            }
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
