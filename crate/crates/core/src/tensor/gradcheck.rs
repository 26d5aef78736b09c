//! Central finite-difference gradient checking in 64-bit precision.

use super::{no_grad, Tensor};
use crate::error::Result;

/// Outcome of comparing analytic and numerical gradients for one input.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub input: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`.
    pub rel_error: f64,
}

const NORM_FLOOR: f64 = 1e-8;

/// Checks `∂f/∂inputs[i]` for every `i` where `f` maps the inputs to a scalar.
///
/// The inputs are used as templates: fresh leaves with `requires_grad` are
/// created from their values.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> Result<Vec<GradCheck>>
where
    F: Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
{
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.detach().requires_grad_(true)).collect();
    let out = f(&leaves)?;
    out.backward()?;
    let mut report = Vec::with_capacity(leaves.len());
    for (i, leaf) in leaves.iter().enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let base = leaf.to_vec();
        let mut numeric = vec![0.0; base.len()];
        for j in 0..base.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut probe: Vec<Tensor<f64>> = inputs.iter().map(Tensor::detach).collect();
                let mut v = base.clone();
                v[j] += delta;
                probe[i] = Tensor::new(leaf.shape(), v)?;
                no_grad(|| f(&probe)).map(|t| t.item())
            };
            numeric[j] = (eval(step)? - eval(-step)?) / (2.0 * step);
        }
        let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
        let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
        report.push(GradCheck {
            input: i,
            analytic,
            numeric,
            rel_error: diff / na.max(nn).max(NORM_FLOOR),
        });
    }
    Ok(report)
}

/// Largest relative error across all inputs.
pub fn max_rel_error(checks: &[GradCheck]) -> f64 {
    checks.iter().map(|c| c.rel_error).fold(0.0, f64::max)
}
