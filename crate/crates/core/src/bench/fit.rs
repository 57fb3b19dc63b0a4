//! Least-squares trend fits over sweep rows.

use super::SweepRow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Fit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<Fit> {
    if xs.len() != ys.len() {
        return Err(Error::Fit(format!("{} x values but {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 3 {
        return Err(Error::Fit(format!("need at least 3 points, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 || !sxx.is_finite() {
        return Err(Error::Fit("x values have no spread".into()));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let ss_res: f64 = xs.iter().zip(ys).map(|(x, y)| (y - slope * x - intercept).powi(2)).sum();
    let r2 = if ss_tot == 0.0 {
        if ss_res == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        1.0 - ss_res / ss_tot
    };
    Ok(Fit { slope, intercept, r2 })
}

/// Fit of `ln y` against `ln x`; the slope is the scaling exponent.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<Fit> {
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::Fit("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    LTotal,
    N,
    D,
    PeakBytes,
    TimeMs,
    MaxRelErr,
}

impl Field {
    pub fn get(self, row: &SweepRow) -> Option<f64> {
        match self {
            Field::LTotal => Some(row.l_total as f64),
            Field::N => Some(row.n as f64),
            Field::D => Some(row.d as f64),
            Field::PeakBytes => row.peak_bytes.map(|v| v as f64),
            Field::TimeMs => row.time_ms,
            Field::MaxRelErr => row.max_rel_err,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::LTotal => "L_total",
            Field::N => "n",
            Field::D => "d",
            Field::PeakBytes => "peak_bytes",
            Field::TimeMs => "time_ms",
            Field::MaxRelErr => "max_rel_err",
        }
    }
}

fn columns(rows: &[SweepRow], x: Field, y: Field) -> (Vec<f64>, Vec<f64>) {
    rows.iter().filter_map(|r| Some((x.get(r)?, y.get(r)?))).unzip()
}

/// Linear fit of `y` against `x` over the rows where both are present.
pub fn fit_scaling(rows: &[SweepRow], x: Field, y: Field) -> Result<Fit> {
    let (xs, ys) = columns(rows, x, y);
    fit_line(&xs, &ys)
}

/// Log-log fit of `y` against `x` over the rows where both are present.
pub fn fit_exponent(rows: &[SweepRow], x: Field, y: Field) -> Result<Fit> {
    let (xs, ys) = columns(rows, x, y);
    fit_loglog(&xs, &ys)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line() {
        let f = fit_line(&[1.0, 2.0, 3.0, 4.0], &[3.0, 5.0, 7.0, 9.0]).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_has_zero_slope() {
        let f = fit_line(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(f.slope, 0.0);
        assert_eq!(f.r2, 1.0);
    }

    #[test]
    fn degenerate_inputs_are_rejected() {
        assert!(fit_line(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]).is_err());
        assert!(fit_line(&[1.0, 2.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn loglog_recovers_power() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powi(2)).collect();
        let f = fit_loglog(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
    }
}
