use serde::Serialize;

use crate::error::{Error, Result};

/// `y ≈ A·x^b` fitted by least squares in log-log space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerLawFit {
    pub coefficient: f64,
    pub exponent: f64,
    /// Sum of squared log residuals.
    pub residual: f64,
}

pub fn power_law_fit(points: &[(f64, f64)]) -> Result<PowerLawFit> {
    if points.len() < 2 {
        return Err(Error::invalid("power_law_fit: need at least 2 points"));
    }
    if let Some((x, y)) = points.iter().find(|(x, y)| !(*x > 0.0 && *y > 0.0)) {
        return Err(Error::invalid(format!("power_law_fit: nonpositive point ({x}, {y})")));
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 {
        return Err(Error::degenerate("power_law_fit", "all x values are equal"));
    }
    let b = sxy / sxx;
    let a = my - b * mx;
    let residual = lx.iter().zip(&ly).map(|(x, y)| (y - a - b * x).powi(2)).sum();
    Ok(PowerLawFit {
        coefficient: a.exp(),
        exponent: b,
        residual,
    })
}
