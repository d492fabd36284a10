use serde::Serialize;
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::lmm::MixedFit;

#[derive(Debug, Clone, Serialize)]
pub struct WaldTest {
    pub coefficient: String,
    pub estimate: f64,
    pub standard_error: f64,
    pub z: f64,
    /// Two-sided p-value under the standard normal.
    pub p_value: f64,
    pub stars: String,
}

/// Significance marker: `***` for p ≤ 0.001, `**` for p ≤ 0.01, `*` for p ≤ 0.05.
pub fn stars_for(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p <= 0.01 {
        "**"
    } else if p <= 0.05 {
        "*"
    } else {
        ""
    }
}

pub fn wald_test(fit: &MixedFit, coefficient: &str) -> Result<WaldTest> {
    let (estimate, se) = fit
        .coefficient(coefficient)
        .ok_or_else(|| Error::UnknownCoefficient(coefficient.to_string()))?;
    let z = if estimate == 0.0 { 0.0 } else { estimate / se };
    let p_value = erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(WaldTest {
        coefficient: coefficient.to_string(),
        estimate,
        standard_error: se,
        z,
        p_value,
        stars: stars_for(p_value).to_string(),
    })
}
