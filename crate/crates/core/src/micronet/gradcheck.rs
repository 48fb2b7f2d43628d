//! Central finite-difference verification of reverse-mode gradients.

use super::{MicronetError, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
const DENOM_FLOOR: f64 = 1e-8;

/// Worst coordinate found by [`check_gradients`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(input, flat index, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + DENOM_FLOOR)
}

/// Compares `∂f/∂inputs` from [`Tensor::backward`] with central differences.
///
/// `inputs` are `(shape, data)` pairs; `f` receives them as tensors (trainable
/// for the analytic pass, constants for the numeric ones) and must return a
/// scalar. With `max_per_input = Some(k)`, only `k` evenly strided
/// coordinates of each input are differenced.
pub fn check_gradients<F>(
    inputs: &[(Vec<usize>, Vec<f64>)],
    f: F,
    max_per_input: Option<usize>,
) -> Result<GradReport, MicronetError>
where
    F: Fn(&[Tensor]) -> Result<Tensor, MicronetError>,
{
    let params = inputs
        .iter()
        .map(|(s, d)| Tensor::param(s, d.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = f(&params)?;
    loss.backward()?;
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let eval = |which: usize, k: usize, delta: f64| -> Result<f64, MicronetError> {
        let ts = inputs
            .iter()
            .enumerate()
            .map(|(i, (s, d))| {
                let mut d = d.clone();
                if i == which {
                    d[k] += delta;
                }
                Tensor::new(s, d)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(f(&ts)?.item())
    };

    let mut report = GradReport { checked: 0, max_rel_err: 0.0, worst: None };
    for (i, (_, d)) in inputs.iter().enumerate() {
        let n = d.len();
        let stride = match max_per_input {
            Some(k) if k > 0 && k < n => n.div_ceil(k),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let numeric = (eval(i, k, STEP)? - eval(i, k, -STEP)?) / (2.0 * STEP);
            let e = rel_err(analytic[i][k], numeric);
            report.checked += 1;
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, k, analytic[i][k], numeric));
            }
        }
    }
    Ok(report)
}
