//! Central finite-difference gradient verification.

use crate::error::Result;
use crate::numerics::Tensor;

/// Outcome of comparing an analytic gradient against central differences.
#[derive(Clone, Debug)]
pub struct GradRecord {
    pub op_name: String,
    pub analytic_grad: Tensor,
    pub numeric_grad: Tensor,
    pub max_rel_error: f64,
}

/// Elementwise `|a - n| / max(|a|, |n|, 1e-8)`, maximized.
pub fn max_rel_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Central differences of a scalar function around `x`.
pub fn numeric_gradient(
    x: &Tensor,
    step: f64,
    mut f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<Tensor> {
    let mut probe = x.clone();
    let mut out = vec![0.0; x.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        *o = (up - down) / (2.0 * step);
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Compares `analytic` with the central-difference gradient of `f` at `x`.
pub fn check_gradient(
    op_name: &str,
    x: &Tensor,
    analytic: Tensor,
    step: f64,
    f: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<GradRecord> {
    let numeric = numeric_gradient(x, step, f)?;
    let max_rel_error = max_rel_error(&analytic, &numeric);
    Ok(GradRecord {
        op_name: op_name.to_string(),
        analytic_grad: analytic,
        numeric_grad: numeric,
        max_rel_error,
    })
}
