//! Central finite-difference gradient checking.
//!
//! Derivatives use the fourth-order five-point stencil
//! `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h`, which keeps truncation
//! error negligible at step sizes large enough to bury rounding noise.

use crate::error::{Error, Result};

/// Denominator floor for relative errors, so exact zeros compare cleanly.
pub const ABS_FLOOR: f64 = 1e-12;

/// Step for smooth functions.
pub const DEFAULT_EPS: f64 = 1e-3;

/// Step for piecewise-smooth functions (ReLU networks), small enough that
/// the stencil rarely straddles a kink.
pub const KINKED_EPS: f64 = 1e-5;

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coordinate: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }

    /// Combines two reports, keeping the worse one's coordinate.
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let coordinates = self.coordinates + other.coordinates;
        let mut worst = if other.max_rel_error > self.max_rel_error { other } else { self };
        worst.coordinates = coordinates;
        worst
    }
}

impl Default for GradCheckReport {
    fn default() -> Self {
        Self { max_rel_error: 0.0, worst_coordinate: 0, coordinates: 0 }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ABS_FLOOR)
}

/// Five-point central-difference gradient of `f` at `point`.
pub fn numerical_gradient<F>(f: F, point: &[f64], eps: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    let mut grad = Vec::with_capacity(point.len());
    for i in 0..point.len() {
        let orig = x[i];
        let mut at = |offset: f64| {
            x[i] = orig + offset;
            f(&x)
        };
        let values = [at(2.0 * eps), at(eps), at(-eps), at(-2.0 * eps)];
        x[i] = orig;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteFunction { coordinate: i });
        }
        // differences first, so a coordinate f ignores gives exactly zero
        grad.push((8.0 * (values[1] - values[2]) - (values[0] - values[3])) / (12.0 * eps));
    }
    Ok(grad)
}

/// Compares `analytic` against central differences of `f` at `point` and
/// returns the worst per-coordinate relative error.
pub fn gradient_check<F>(f: F, analytic: &[f64], point: &[f64], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&[f64]) -> f64,
{
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::InvalidConfig(format!("eps {eps} outside [1e-8, 1e-3]")));
    }
    if analytic.len() != point.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("gradient of length {}", point.len()),
            got: format!("{}", analytic.len()),
        });
    }
    let numeric = numerical_gradient(f, point, eps)?;
    let mut report = GradCheckReport { coordinates: point.len(), ..Default::default() };
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > report.max_rel_error || e.is_nan() {
            report.max_rel_error = if e.is_nan() { f64::INFINITY } else { e };
            report.worst_coordinate = i;
        }
    }
    Ok(report)
}
