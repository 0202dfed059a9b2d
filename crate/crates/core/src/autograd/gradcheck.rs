//! Central finite-difference checking of tape gradients.

use super::graph::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    /// Perturbation half-width.
    pub eps: f64,
    /// Maximum accepted `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub rel_tol: f64,
    /// Denominator floor so that vanishing gradients are compared absolutely.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per input tensor.
    pub max_entries_per_input: Option<usize>,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            rel_tol: 1e-4,
            floor: 1e-6,
            max_entries_per_input: None,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, entry, analytic, numeric)` for the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub rel_tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel_err <= self.rel_tol
    }
}

/// Builds the scalar function `build` over `inputs` (all registered as trainable
/// leaves), differentiates it on the tape and compares every (or a sample of)
/// input entries against central differences.
pub fn check_gradients<F>(inputs: &[Tensor], cfg: GradCheck, build: F) -> Result<GradCheckReport>
where
    F: Fn(&Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(Error::Shape(format!("gradcheck needs a scalar output, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&g, &vars)?;
    let grads = g.backward(out);
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let mut report = GradCheckReport {
        rel_tol: cfg.rel_tol,
        ..Default::default()
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let picks: Vec<usize> = match cfg.max_entries_per_input {
            Some(m) if m < n => (0..m).map(|j| j * n / m + (n / m) / 2).collect(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let orig = input.data()[idx];
            work[i].data_mut()[idx] = orig + cfg.eps;
            let plus = eval(&work)?;
            work[i].data_mut()[idx] = orig - cfg.eps;
            let minus = eval(&work)?;
            work[i].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[i].data()[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(cfg.floor);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                if rel >= report.max_rel_err {
                    report.worst = Some((i, idx, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
