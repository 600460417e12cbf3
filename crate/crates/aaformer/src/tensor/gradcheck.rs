//! Central finite-difference utilities for verifying analytic gradients.
//!
//! The estimate re-runs a caller-supplied forward evaluation with the probed
//! coordinate nudged by ±h, so it never touches the reverse-mode path it is
//! checking.

use super::{Result, Tensor};

/// Estimate d(loss)/d(param[coord]) by central differences. `eval` must run a
/// fresh forward pass and return the scalar loss; the parameter value is
/// restored before returning.
pub fn central_difference(
    param: &Tensor,
    coord: usize,
    h: f64,
    eval: &mut dyn FnMut() -> Result<f64>,
) -> Result<f64> {
    let orig = param.value_at(coord);
    param.set_value(coord, orig + h);
    let plus = eval();
    param.set_value(coord, orig - h);
    let minus = eval();
    param.set_value(coord, orig);
    Ok((plus? - minus?) / (2.0 * h))
}

/// Relative error with a small absolute floor so near-zero gradients compare
/// on absolute terms.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}
