//! Numerical tolerances shared by validation, solvers and checks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Absolute tolerance on row sums of P.
    pub row_sum: f64,
    /// Relative tolerance on detailed balance.
    pub detailed_balance: f64,
    /// Absolute tolerance on the total mass of Q.
    pub measure_sum: f64,
    /// Relative window inside which two values count as tied.
    pub tie: f64,
    /// Conditioning events below this probability are flagged, not divided by.
    pub conditional_floor: f64,
    /// Relative margin kept below the Laplace convergence abscissa.
    pub abscissa_margin: f64,
    /// Relative residual accepted for exact identities.
    pub identity: f64,
    /// Minimal ratio between the first excluded and last retained low eigenvalue.
    pub gap_ratio: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            row_sum: 1e-12,
            detailed_balance: 1e-10,
            measure_sum: 1e-12,
            tie: 1e-9,
            conditional_floor: 1e-14,
            abscissa_margin: 1e-9,
            identity: 1e-8,
            gap_ratio: 10.0,
        }
    }
}

impl Tolerances {
    pub fn check(&self) -> Result<()> {
        let all = [
            ("row_sum", self.row_sum),
            ("detailed_balance", self.detailed_balance),
            ("measure_sum", self.measure_sum),
            ("tie", self.tie),
            ("conditional_floor", self.conditional_floor),
            ("abscissa_margin", self.abscissa_margin),
            ("identity", self.identity),
            ("gap_ratio", self.gap_ratio),
        ];
        for (name, v) in all {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Argument(format!("tolerance {name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}
