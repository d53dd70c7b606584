use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub tau: f64,
    pub kinks: f64,
    pub sem: Option<f64>,
}

impl FitPoint {
    pub fn new(tau: f64, kinks: f64) -> Self {
        FitPoint { tau, kinks, sem: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// Inverse relative variance when every point carries a positive SEM,
    /// otherwise uniform.
    #[default]
    Auto,
    Uniform,
}

/// Power law `kinks = A tau^(-x)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerLawFit {
    pub a: f64,
    pub x: f64,
    pub se_a: f64,
    pub se_x: f64,
    /// Root-mean-square residual of `ln kinks`.
    pub residual_rms: f64,
    pub n_points: usize,
    pub tau_min: f64,
    pub tau_max: f64,
}

/// Exponential `kinks = B exp(-rate tau)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExponentialFit {
    pub b: f64,
    pub rate: f64,
    pub se_rate: f64,
    pub rss: f64,
    pub n_points: usize,
}

/// Weighted straight line `y = c0 + c1 t`, returning coefficients, their
/// residual-scaled standard errors and the unweighted residual sum of squares.
pub(crate) struct LineFit {
    pub c0: f64,
    pub c1: f64,
    pub se_c0: f64,
    pub se_c1: f64,
    pub rss: f64,
}

pub(crate) fn weighted_line(t: &[f64], y: &[f64], w: &[f64]) -> Result<LineFit> {
    let n = t.len();
    if n < 2 {
        return Err(Error::Fit(format!("need at least 2 points, got {n}")));
    }
    let sw: f64 = w.iter().sum();
    let tm = t.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let mut stt = 0.0;
    let mut sty = 0.0;
    for i in 0..n {
        stt += w[i] * (t[i] - tm) * (t[i] - tm);
        sty += w[i] * (t[i] - tm) * (y[i] - ym);
    }
    let spread = t.iter().fold(0.0f64, |m, v| m.max((v - tm).abs()));
    if !(stt > 0.0) || spread <= 1e-12 * tm.abs().max(1.0) {
        return Err(Error::Fit("abscissae are degenerate".into()));
    }
    let c1 = sty / stt;
    let c0 = ym - c1 * tm;
    let mut wrss = 0.0;
    let mut rss = 0.0;
    for i in 0..n {
        let r = y[i] - c0 - c1 * t[i];
        wrss += w[i] * r * r;
        rss += r * r;
    }
    let s2 = if n > 2 { wrss / (n - 2) as f64 } else { 0.0 };
    let var_c1 = s2 / stt;
    let var_c0 = s2 * (1.0 / sw + tm * tm / stt);
    Ok(LineFit { c0, c1, se_c0: var_c0.sqrt(), se_c1: var_c1.sqrt(), rss })
}

fn check_points(points: &[FitPoint], min: usize) -> Result<()> {
    if points.len() < min {
        return Err(Error::Fit(format!("need at least {min} points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|p| !(p.tau > 0.0 && p.kinks > 0.0) || !p.tau.is_finite()) {
        return Err(Error::Fit(format!("non-positive point tau = {}, kinks = {}", p.tau, p.kinks)));
    }
    Ok(())
}

fn weights(points: &[FitPoint], weighting: Weighting) -> Vec<f64> {
    let usable = weighting == Weighting::Auto
        && points.iter().all(|p| p.sem.is_some_and(|s| s > 0.0 && s.is_finite()));
    if usable {
        points
            .iter()
            .map(|p| {
                let rel = p.sem.unwrap() / p.kinks;
                1.0 / (rel * rel)
            })
            .collect()
    } else {
        vec![1.0; points.len()]
    }
}

/// Least-squares power law in log-log space.
pub fn fit_power_law(points: &[FitPoint], weighting: Weighting) -> Result<PowerLawFit> {
    check_points(points, 3)?;
    let t: Vec<f64> = points.iter().map(|p| p.tau.ln()).collect();
    let y: Vec<f64> = points.iter().map(|p| p.kinks.ln()).collect();
    let line = weighted_line(&t, &y, &weights(points, weighting))?;
    let a = line.c0.exp();
    Ok(PowerLawFit {
        a,
        x: -line.c1,
        se_a: a * line.se_c0,
        se_x: line.se_c1,
        residual_rms: (line.rss / points.len() as f64).sqrt(),
        n_points: points.len(),
        tau_min: points.iter().map(|p| p.tau).fold(f64::INFINITY, f64::min),
        tau_max: points.iter().map(|p| p.tau).fold(f64::NEG_INFINITY, f64::max),
    })
}

/// Least-squares exponential in semi-log space.
pub fn fit_exponential(points: &[FitPoint], weighting: Weighting) -> Result<ExponentialFit> {
    check_points(points, 3)?;
    let t: Vec<f64> = points.iter().map(|p| p.tau).collect();
    let y: Vec<f64> = points.iter().map(|p| p.kinks.ln()).collect();
    let line = weighted_line(&t, &y, &weights(points, weighting))?;
    Ok(ExponentialFit {
        b: line.c0.exp(),
        rate: -line.c1,
        se_rate: line.se_c1,
        rss: line.rss,
        n_points: points.len(),
    })
}

/// Points kept for a power-law fit: kinks at or above `min_kinks`, and for
/// externally measured rows at least `min_runs` contributing runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitWindow {
    pub min_kinks: f64,
    pub min_runs: usize,
}

impl Default for FitWindow {
    fn default() -> Self {
        FitWindow { min_kinks: 1e-3, min_runs: 2 }
    }
}

pub fn write_fit<W: Write>(fit: &PowerLawFit, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["A", "x", "se_A", "se_x", "residual_rms", "n_points", "tau_min", "tau_max"])?;
    w.write_record([
        fit.a.to_string(),
        fit.x.to_string(),
        fit.se_a.to_string(),
        fit.se_x.to_string(),
        fit.residual_rms.to_string(),
        fit.n_points.to_string(),
        fit.tau_min.to_string(),
        fit.tau_max.to_string(),
    ])?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn synth(a: f64, x: f64, taus: &[f64]) -> Vec<FitPoint> {
        taus.iter().map(|&t| FitPoint::new(t, a * t.powf(-x))).collect()
    }

    #[test]
    fn exact_power_law() {
        let pts = synth(3.2, 0.5, &[1.0, 2.0, 5.0, 10.0, 50.0]);
        let f = fit_power_law(&pts, Weighting::Auto).unwrap();
        assert!((f.x - 0.5).abs() < 1e-12);
        assert!((f.a - 3.2).abs() < 1e-11);
        assert!(f.residual_rms < 1e-12 && f.se_x < 1e-10);
        assert_eq!((f.n_points, f.tau_min, f.tau_max), (5, 1.0, 50.0));
    }

    #[test]
    fn exact_exponential() {
        let pts: Vec<FitPoint> =
            [0.5, 1.0, 2.0, 4.0].iter().map(|&t| FitPoint::new(t, 2.0 * (-0.7 * t).exp())).collect();
        let f = fit_exponential(&pts, Weighting::Uniform).unwrap();
        assert!((f.rate - 0.7).abs() < 1e-12 && (f.b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(fit_power_law(&synth(1.0, 0.5, &[1.0, 2.0]), Weighting::Auto).is_err());
        assert!(fit_power_law(&synth(1.0, 0.5, &[2.0, 2.0, 2.0]), Weighting::Auto).is_err());
        let mut pts = synth(1.0, 0.5, &[1.0, 2.0, 3.0]);
        pts[1].kinks = 0.0;
        assert!(fit_power_law(&pts, Weighting::Auto).is_err());
    }

    #[test]
    fn sem_weights_downweight_noisy_points() {
        let mut pts = synth(1.0, 0.5, &[1.0, 2.0, 4.0, 8.0]);
        for p in &mut pts {
            p.sem = Some(1e-3 * p.kinks);
        }
        pts.push(FitPoint { tau: 16.0, kinks: 10.0, sem: Some(1e6) });
        let f = fit_power_law(&pts, Weighting::Auto).unwrap();
        assert!((f.x - 0.5).abs() < 1e-6);
        let u = fit_power_law(&pts, Weighting::Uniform).unwrap();
        assert!((u.x - 0.5).abs() > 0.1);
    }

    #[test]
    fn fit_block_header() {
        let f = fit_power_law(&synth(1.0, 0.5, &[1.0, 2.0, 4.0]), Weighting::Auto).unwrap();
        let mut buf = Vec::new();
        write_fit(&f, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("A,x,se_A,se_x,residual_rms,n_points,tau_min,tau_max\n"));
    }
}
