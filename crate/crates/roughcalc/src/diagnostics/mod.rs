//! Rate regressions, the moment-scaling diagnostic and the scenario runner.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub mod scaling;
pub mod scenario;
pub mod suites;

pub use scaling::{iterated_remainder_integral, kolmogorov_scaling_fit, ScaleNorm, ScalingFit};

/// Ordinary least squares fit of `ln residual = intercept + slope · ln mesh`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Number of points used; zero residuals are excluded.
    pub points: usize,
    pub excluded_zeros: usize,
}

fn ols(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64)> {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    if sxx <= 0.0 || !sxx.is_finite() {
        return Err(Error::InsufficientData("abscissae are all equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    Ok((slope, intercept, r2))
}

/// Log-log regression of `(mesh, residual)` pairs. Needs at least `min_points`
/// pairs with positive residual.
pub fn fit_log_log(table: &[(f64, f64)], min_points: usize) -> Result<RateFit> {
    if table.iter().any(|&(m, r)| m <= 0.0 || !m.is_finite() || r < 0.0 || r.is_nan()) {
        return Err(Error::InsufficientData("meshes must be positive and residuals nonnegative".into()));
    }
    let used: Vec<(f64, f64)> = table.iter().filter(|&&(_, r)| r > 0.0).copied().collect();
    if used.len() < min_points.max(2) {
        return Err(Error::InsufficientData(format!(
            "{} positive residuals, need {}",
            used.len(),
            min_points.max(2)
        )));
    }
    let xs: Vec<f64> = used.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = used.iter().map(|p| p.1.ln()).collect();
    let (slope, intercept, r_squared) = ols(&xs, &ys)?;
    Ok(RateFit { slope, intercept, r_squared, points: used.len(), excluded_zeros: table.len() - used.len() })
}

/// Convergence rate of a residual table (at least three meshes).
pub fn convergence_rate(table: &[(f64, f64)]) -> Result<RateFit> {
    fit_log_log(table, 3)
}

/// Reads `(mesh, residual)` pairs from CSV with a `mesh` column and a
/// `median` or `residual` column.
pub fn read_rate_table<R: std::io::Read>(reader: R) -> Result<Vec<(f64, f64)>> {
    let mut rd = csv::Reader::from_reader(reader);
    let headers = rd.headers()?.clone();
    let col = |names: &[&str]| headers.iter().position(|h| names.contains(&h.trim()));
    let (Some(m), Some(r)) = (col(&["mesh"]), col(&["median", "residual"])) else {
        return Err(Error::Config("rate table needs a `mesh` column and a `median` or `residual` column".into()));
    };
    let mut table = Vec::new();
    for (i, rec) in rd.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| {
            rec.get(c)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .ok_or_else(|| Error::Config(format!("row {}: column {} is not a number", i + 1, &headers[c])))
        };
        table.push((num(m)?, num(r)?));
    }
    Ok(table)
}
