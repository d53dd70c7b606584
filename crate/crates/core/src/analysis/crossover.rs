use serde::{Deserialize, Serialize};

use super::fit::{weighted_line, FitPoint};
use crate::error::{Error, Result};

pub const MIN_CROSSOVER_POINTS: usize = 6;
pub const MIN_CROSSOVER_DECADES: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RightBehavior {
    Exponential,
    PowerLaw,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossoverOptions {
    /// Fewest points in the exponential segment.
    pub min_right: usize,
}

impl Default for CrossoverOptions {
    fn default() -> Self {
        CrossoverOptions { min_right: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Crossover {
    /// Geometric midpoint between the last power-law point and the first
    /// exponential point (the first point when no power-law segment exists).
    pub tau_break: f64,
    pub break_index: usize,
    pub left_exponent: Option<f64>,
    pub right_rate: f64,
    pub rss_total: f64,
    pub right_behavior: RightBehavior,
    /// Power-law RSS over exponential RSS on the right segment.
    pub rss_ratio: f64,
}

fn rss_line(t: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if t.len() == 2 {
        return Ok((0.0, (y[1] - y[0]) / (t[1] - t[0])));
    }
    let l = weighted_line(t, y, &vec![1.0; t.len()])?;
    Ok((l.rss, l.c1))
}

/// Split a kinks-vs-tau curve into a power-law head and an exponential
/// tail, choosing the break that minimizes the combined log residual.
pub fn crossover_detect(points: &[FitPoint], opts: CrossoverOptions) -> Result<Crossover> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.tau.total_cmp(&b.tau));
    let n = pts.len();
    if n < MIN_CROSSOVER_POINTS {
        return Err(Error::Fit(format!("crossover needs {MIN_CROSSOVER_POINTS} points, got {n}")));
    }
    if pts.iter().any(|p| !(p.tau > 0.0 && p.kinks > 0.0)) {
        return Err(Error::Fit("crossover needs positive tau and kinks".into()));
    }
    let decades = (pts[n - 1].tau / pts[0].tau).log10();
    if decades < MIN_CROSSOVER_DECADES {
        return Err(Error::Fit(format!("crossover needs {MIN_CROSSOVER_DECADES} decades, got {decades:.2}")));
    }
    let min_right = opts.min_right.max(3).min(n);
    let ln_t: Vec<f64> = pts.iter().map(|p| p.tau.ln()).collect();
    let t: Vec<f64> = pts.iter().map(|p| p.tau).collect();
    let y: Vec<f64> = pts.iter().map(|p| p.kinks.ln()).collect();

    let mut best: Option<(usize, f64, Option<f64>, f64)> = None;
    for b in (0..=n - min_right).filter(|&b| b != 1) {
        let (rss_l, exponent) = if b == 0 {
            (0.0, None)
        } else {
            let (r, s) = rss_line(&ln_t[..b], &y[..b])?;
            (r, Some(-s))
        };
        let (rss_r, slope) = rss_line(&t[b..], &y[b..])?;
        let total = rss_l + rss_r;
        if best.is_none_or(|(_, bt, _, _)| total < bt - 1e-14 * bt.abs().max(1e-300)) {
            best = Some((b, total, exponent, -slope));
        }
    }
    let (b, rss_total, left_exponent, right_rate) = best.expect("at least one split");
    let (rss_exp, _) = rss_line(&t[b..], &y[b..])?;
    let (rss_pow, _) = rss_line(&ln_t[b..], &y[b..])?;
    let scale = y[b..].iter().map(|v| v.abs()).fold(1.0, f64::max);
    let floor = 1e-24 * scale * scale;
    let rss_ratio = (rss_pow + floor) / (rss_exp + floor);
    let tau_break = if b == 0 { pts[0].tau } else { (pts[b - 1].tau * pts[b].tau).sqrt() };
    Ok(Crossover {
        tau_break,
        break_index: b,
        left_exponent,
        right_rate,
        rss_total,
        right_behavior: if rss_exp < rss_pow { RightBehavior::Exponential } else { RightBehavior::PowerLaw },
        rss_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::theory::{adiabatic_timescale, kzm_density, log_grid, lz_probability};

    #[test]
    fn pure_exponential_breaks_at_start() {
        let pts: Vec<FitPoint> =
            log_grid(0.05, 8.0, 12).iter().map(|&t| FitPoint::new(t, 2.0 * (-t).exp())).collect();
        let c = crossover_detect(&pts, CrossoverOptions::default()).unwrap();
        assert_eq!(c.break_index, 0);
        assert_eq!(c.right_behavior, RightBehavior::Exponential);
        assert!(c.rss_ratio > 2.0);
        assert!((c.right_rate - 1.0).abs() < 1e-10);
    }

    #[test]
    fn pure_power_law_has_power_tail() {
        let pts: Vec<FitPoint> =
            log_grid(1.0, 1000.0, 10).iter().map(|&t| FitPoint::new(t, 5.0 / t.sqrt())).collect();
        let c = crossover_detect(&pts, CrossoverOptions::default()).unwrap();
        assert_eq!(c.right_behavior, RightBehavior::PowerLaw);
        assert!((c.left_exponent.unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn composite_curve_breaks_near_joint() {
        let joint: f64 = 10.0;
        let curve = |t: f64| {
            if t <= joint {
                (t / joint).powf(-0.5)
            } else {
                (-(t - joint) / 5.0).exp()
            }
        };
        let pts: Vec<FitPoint> = log_grid(0.1, 60.0, 24).iter().map(|&t| FitPoint::new(t, curve(t))).collect();
        let c = crossover_detect(&pts, CrossoverOptions::default()).unwrap();
        assert!(c.tau_break > joint / 2.0 && c.tau_break < joint * 2.0, "{}", c.tau_break);
        assert_eq!(c.right_behavior, RightBehavior::Exponential);
    }

    #[test]
    fn kzm_then_lz_breaks_near_adiabatic_time() {
        let l = 10;
        let tau_ad = adiabatic_timescale(1.0, l);
        let kinks = |t: f64| if t < tau_ad { l as f64 * kzm_density(1.0, t) } else { 2.0 * lz_probability(1.0, t, l) };
        let pts: Vec<FitPoint> =
            log_grid(0.02 * tau_ad, 8.0 * tau_ad, 16).iter().map(|&t| FitPoint::new(t, kinks(t))).collect();
        let c = crossover_detect(&pts, CrossoverOptions::default()).unwrap();
        let ratio = c.tau_break / tau_ad;
        assert!((0.5..=2.0).contains(&ratio), "ratio {ratio}");
        assert_eq!(c.right_behavior, RightBehavior::Exponential);
        assert!((c.left_exponent.unwrap() - 0.5).abs() < 1e-10);
    }

    #[test]
    fn rejects_short_span() {
        let pts: Vec<FitPoint> = log_grid(1.0, 50.0, 10).iter().map(|&t| FitPoint::new(t, 1.0 / t)).collect();
        assert!(crossover_detect(&pts, CrossoverOptions::default()).is_err());
        assert!(crossover_detect(&pts[..5], CrossoverOptions::default()).is_err());
    }
}
