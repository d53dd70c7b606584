//! Closed-form reference predictions (hbar = 1) and regime labels.

use std::f64::consts::PI;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Landau-Zener probability of creating a kink pair,
/// `exp(-2 pi^3 J tau_q / L^2)`.
pub fn lz_probability(j_c: f64, tau_q: f64, l: usize) -> f64 {
    (-2.0 * PI.powi(3) * j_c * tau_q / (l as f64).powi(2)).exp()
}

/// Quench time beyond which pair creation is exponentially suppressed,
/// `L^2 / (2 pi^3 J)`.
pub fn adiabatic_timescale(j_c: f64, l: usize) -> f64 {
    (l as f64).powi(2) / (2.0 * PI.powi(3) * j_c)
}

/// Kibble-Zurek kink density `(1 / 2 pi) (2 J tau_q)^(-1/2)`.
pub fn kzm_density(j_c: f64, tau_q: f64) -> f64 {
    (2.0 * j_c * tau_q).powf(-0.5) / (2.0 * PI)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    #[serde(rename = "LZ")]
    Lz,
    #[serde(rename = "crossover")]
    Crossover,
    #[serde(rename = "KZM")]
    Kzm,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Lz => "LZ",
            Regime::Crossover => "crossover",
            Regime::Kzm => "KZM",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Kink-count thresholds separating the regimes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeThresholds {
    pub k_lo: f64,
    pub k_hi: f64,
}

impl Default for RegimeThresholds {
    fn default() -> Self {
        RegimeThresholds { k_lo: 0.5, k_hi: 3.0 }
    }
}

pub fn classify_regime(expected_kinks: f64, th: RegimeThresholds) -> Regime {
    if expected_kinks < th.k_lo {
        Regime::Lz
    } else if expected_kinks > th.k_hi {
        Regime::Kzm
    } else {
        Regime::Crossover
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoryPrediction {
    pub tau_q: f64,
    pub p_lz: f64,
    pub tau_ad: f64,
    pub kzm_density: f64,
    pub expected_kinks: f64,
    pub regime: Regime,
}

/// Expected kinks: `L` times the KZM density below `tau_AD`, two kinks per
/// Landau-Zener pair above it.
pub fn predict(j_c: f64, tau_q: f64, l: usize, th: RegimeThresholds) -> TheoryPrediction {
    let tau_ad = adiabatic_timescale(j_c, l);
    let p_lz = lz_probability(j_c, tau_q, l);
    let density = kzm_density(j_c, tau_q);
    let expected_kinks = if tau_q <= tau_ad { l as f64 * density } else { 2.0 * p_lz };
    TheoryPrediction {
        tau_q,
        p_lz,
        tau_ad,
        kzm_density: density,
        expected_kinks,
        regime: classify_regime(expected_kinks, th),
    }
}

/// Invert the decoherent anticrossing law `p = Q eps / (2 Delta^2)`:
/// `Q = 2 Delta^2 p / eps`.
pub fn avron_extract_q(p: f64, delta: f64, gamma: f64, eps: f64) -> Result<f64> {
    if !(p >= 0.0 && delta > 0.0 && gamma > 0.0 && eps > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need p >= 0 and positive Delta, gamma, eps (p = {p}, Delta = {delta}, gamma = {gamma}, eps = {eps})"
        )));
    }
    Ok(2.0 * delta * delta * p / eps)
}

/// Rows `tau_Q, p_LZ, kzm_kinks, regime` over a grid of quench times.
pub fn theory_overlay(j_c: f64, l: usize, taus: &[f64], th: RegimeThresholds) -> Vec<TheoryPrediction> {
    taus.iter().map(|&t| predict(j_c, t, l, th)).collect()
}

pub fn write_overlay<W: Write>(rows: &[TheoryPrediction], l: usize, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["tau_Q", "p_LZ", "kzm_kinks", "regime"])?;
    for r in rows {
        w.write_record([
            r.tau_q.to_string(),
            r.p_lz.to_string(),
            (l as f64 * r.kzm_density).to_string(),
            r.regime.as_str().to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Log-spaced grid of `n` points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|k| (lo.ln() + (hi.ln() - lo.ln()) * k as f64 / (n - 1) as f64).exp())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lz_at_adiabatic_time_is_inverse_e() {
        for l in [2, 8, 50] {
            let t = adiabatic_timescale(1.0, l);
            assert!((lz_probability(1.0, t, l) - (-1.0f64).exp()).abs() < 1e-15);
            assert!((lz_probability(1.0, 3.0 * t, l) - (-3.0f64).exp()).abs() < 1e-15);
        }
        assert!((lz_probability(1.0, 1e-12, 8) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn direct_evaluations() {
        assert!((lz_probability(1.0, 2.0, 8) - (-PI.powi(3) / 16.0).exp()).abs() < 1e-15);
        assert!((lz_probability(1.0, 2.0, 8) - 0.1441).abs() < 1e-4);
        assert!((adiabatic_timescale(1.0, 2) - 0.06450).abs() < 1e-5);
        assert!((adiabatic_timescale(1.0, 20) / adiabatic_timescale(1.0, 10) - 4.0).abs() < 1e-14);
        assert!((kzm_density(1.0, 0.5) - 1.0 / (2.0 * PI)).abs() < 1e-15);
        assert!((kzm_density(1.0, 40.0) / kzm_density(1.0, 10.0) - 0.5).abs() < 1e-15);
        assert!((100.0 * kzm_density(1.0, 50.0) - 10.0 / (2.0 * PI)).abs() < 1e-12);
    }

    #[test]
    fn log_p_is_linear_in_tau() {
        let tau_ad = adiabatic_timescale(0.7, 12);
        for &t in &[0.1, 1.0, 7.5, 40.0] {
            let lhs = -lz_probability(0.7, t, 12).ln();
            assert!((lhs - t / tau_ad).abs() <= 1e-12 * lhs.max(1.0));
        }
    }

    #[test]
    fn density_scale_invariance() {
        assert!((kzm_density(3.0, 2.0 / 3.0) - kzm_density(1.0, 2.0)).abs() < 1e-15);
    }

    #[test]
    fn regimes() {
        let th = RegimeThresholds::default();
        assert_eq!(classify_regime(0.1, th), Regime::Lz);
        assert_eq!(classify_regime(1.0, th), Regime::Crossover);
        assert_eq!(classify_regime(10.0, th), Regime::Kzm);
    }

    #[test]
    fn q_round_trip() {
        assert_eq!(avron_extract_q(0.0, 1.0, 0.1, 0.2).unwrap(), 0.0);
        let (delta, eps) = (0.8, 0.05);
        let p = 0.5 * eps / (2.0 * delta * delta);
        assert!((avron_extract_q(p, delta, 0.3, eps).unwrap() - 0.5).abs() < 1e-15);
        assert!(avron_extract_q(0.1, 0.0, 0.3, eps).is_err());
    }

    #[test]
    fn overlay_has_header() {
        let rows = theory_overlay(1.0, 10, &log_grid(0.1, 100.0, 5), RegimeThresholds::default());
        let mut buf = Vec::new();
        write_overlay(&rows, 10, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("tau_Q,p_LZ,kzm_kinks,regime\n"));
        assert_eq!(text.lines().count(), 6);
    }
}
