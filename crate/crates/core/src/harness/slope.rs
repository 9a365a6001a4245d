//! Log-log regression of mean MSE against a size axis.

use std::collections::BTreeMap;

use super::trial::{Status, TrialRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlopeAxis {
    BootstrapSize,
    Machines,
    TotalSize,
}

impl SlopeAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "n" => Some(SlopeAxis::BootstrapSize),
            "d" => Some(SlopeAxis::Machines),
            "N" => Some(SlopeAxis::TotalSize),
            _ => None,
        }
    }

    pub fn value(self, r: &TrialRecord) -> usize {
        match self {
            SlopeAxis::BootstrapSize => r.n,
            SlopeAxis::Machines => r.d,
            SlopeAxis::TotalSize => r.total_size,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// `(x, mean mse)` per distinct axis value, ascending in x.
    pub points: Vec<(f64, f64)>,
}

/// Mean MSE of ok records per axis value.
pub fn mean_mse_by(records: &[TrialRecord], axis: SlopeAxis) -> Vec<(f64, f64)> {
    let mut groups: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        if let (Status::Ok, Some(mse)) = (&r.status, r.mse) {
            let g = groups.entry(axis.value(r)).or_insert((0.0, 0));
            g.0 += mse;
            g.1 += 1;
        }
    }
    groups.into_iter().map(|(x, (s, c))| (x as f64, s / c as f64)).collect()
}

/// Ordinary least squares of `ln(mean mse)` on `ln(x)`. Records are
/// expected to belong to one estimator.
pub fn fit_loglog_slope(records: &[TrialRecord], axis: SlopeAxis) -> Result<SlopeFit> {
    let points = mean_mse_by(records, axis);
    if points.len() < 3 {
        return Err(Error::InvalidInput(format!(
            "slope needs at least 3 distinct axis values with ok mse, found {}",
            points.len()
        )));
    }
    if let Some((x, _)) = points.iter().find(|(_, y)| !(*y > 0.0)) {
        return Err(Error::InvalidInput(format!("mean mse at {x} is not positive")));
    }
    let logs: Vec<(f64, f64)> = points.iter().map(|(x, y)| (x.ln(), y.ln())).collect();
    let (slope, intercept, r_squared) = ols(&logs);
    Ok(SlopeFit { slope, intercept, r_squared, points })
}

/// `(slope, intercept, r^2)` of `y` on `x`.
pub fn ols(xy: &[(f64, f64)]) -> (f64, f64, f64) {
    let n = xy.len() as f64;
    let mx = xy.iter().map(|p| p.0).sum::<f64>() / n;
    let my = xy.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = xy.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = xy.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = xy.iter().map(|p| (p.1 - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r_squared = if syy == 0.0 { 1.0 } else { (sxy * sxy) / (sxx * syy) };
    (slope, intercept, r_squared)
}
