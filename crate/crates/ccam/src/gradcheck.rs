//! Central-difference gradient verification.
//!
//! The numeric side only ever calls forward passes, so it stays independent
//! of whichever backward implementation it is checking.

/// Perturbation step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Maximum tolerated relative error between analytic and numeric gradients.
pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Relative error with a small floor so near-zero gradients are compared
/// absolutely instead of blowing up the denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-3);
    (analytic - numeric).abs() / scale
}

/// Central difference (f(x+h) − f(x−h)) / 2h of a scalar-valued probe.
pub fn central_difference(mut probe: impl FnMut(f64) -> f64, at: f64, step: f64) -> f64 {
    let plus = probe(at + step);
    let minus = probe(at - step);
    (plus - minus) / (2.0 * step)
}

/// Worst relative error across a gradient slice and its numeric counterpart.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

/// Per-parameter-group outcome of a model-level gradient check.
#[derive(Debug, Clone)]
pub struct GroupReport {
    pub name: String,
    pub max_rel_error: f64,
    pub components: usize,
}

/// Full gradient-check report: one row per parameter group.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups
            .iter()
            .map(|g| g.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= GRAD_TOLERANCE
    }
}
