//! Structured reports for the randomized identity checks. Every check in the
//! crate funnels its sampled residuals through [`VerifyReport`] so the CLI and
//! the test suites read one shape: suite name, seed, sample count, tolerance,
//! residual statistics, pass flag, and any fitted scalars.

use serde::Serialize;
use std::collections::BTreeMap;

/// Outcome of one randomized verification suite. Field order is the JSON
/// schema: suite, seed, count, tol, max_residual, mean_residual, pass, scalars.
#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub seed: u64,
    pub count: usize,
    pub tol: f64,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub pass: bool,
    pub scalars: BTreeMap<String, f64>,
}

impl VerifyReport {
    /// Aggregate a residual sample into a report; an empty sample passes
    /// vacuously with zero residuals.
    pub fn from_residuals(suite: &str, seed: u64, tol: f64, residuals: &[f64]) -> Self {
        let count = residuals.len();
        let max_residual = residuals.iter().cloned().fold(0.0f64, f64::max);
        let mean_residual = if count == 0 {
            0.0
        } else {
            residuals.iter().sum::<f64>() / count as f64
        };
        VerifyReport {
            suite: suite.to_string(),
            seed,
            count,
            tol,
            max_residual,
            mean_residual,
            pass: max_residual <= tol && max_residual.is_finite(),
            scalars: BTreeMap::new(),
        }
    }

    /// Attach a named scalar (fitted constant, slope, ...) to the report.
    pub fn with_scalar(mut self, name: &str, value: f64) -> Self {
        self.scalars.insert(name.to_string(), value);
        self
    }
}
