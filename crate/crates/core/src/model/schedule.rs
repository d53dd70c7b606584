use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Instantaneous uniform scales of the transverse field and the coupling.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Couplings {
    pub g: f64,
    pub j: f64,
}

/// Monotone piecewise-cubic (Fritsch-Carlson) interpolant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotoneCubic {
    x: Vec<f64>,
    y: Vec<f64>,
    slopes: Vec<f64>,
}

impl MonotoneCubic {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::InvalidSchedule("need at least two samples per column".into()));
        }
        if x.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSchedule("sample abscissae must be strictly increasing".into()));
        }
        let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
        let mut slopes = vec![0.0; n];
        if n == 2 {
            slopes[0] = delta[0];
            slopes[1] = delta[0];
        } else {
            for k in 1..n - 1 {
                if delta[k - 1] * delta[k] > 0.0 {
                    let w1 = 2.0 * h[k] + h[k - 1];
                    let w2 = h[k] + 2.0 * h[k - 1];
                    slopes[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
                }
            }
            slopes[0] = end_slope(h[0], h[1], delta[0], delta[1]);
            slopes[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(MonotoneCubic { x, y, slopes })
    }

    pub fn eval(&self, at: f64) -> f64 {
        let n = self.x.len();
        let k = match self.x.partition_point(|&v| v <= at) {
            0 => 0,
            i if i >= n => n - 2,
            i => i - 1,
        };
        let h = self.x[k + 1] - self.x[k];
        let s = (at - self.x[k]) / h;
        let (s2, s3) = (s * s, s * s * s);
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        h00 * self.y[k] + h10 * h * self.slopes[k] + h01 * self.y[k + 1] + h11 * h * self.slopes[k + 1]
    }
}

// Shape-preserving three-point end condition.
fn end_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d.signum() != d0.signum() {
        0.0
    } else if d0.signum() != d1.signum() && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

/// Sampled annealing protocol: `g(s)` and `j(s)` on `s` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleTable {
    s: Vec<f64>,
    g: Vec<f64>,
    j: Vec<f64>,
    g_interp: MonotoneCubic,
    j_interp: MonotoneCubic,
}

impl ScheduleTable {
    pub fn new(s: Vec<f64>, g: Vec<f64>, j: Vec<f64>) -> Result<Self> {
        if s.len() < 2 || g.len() != s.len() || j.len() != s.len() {
            return Err(Error::InvalidSchedule("table columns must have equal length >= 2".into()));
        }
        if s[0] != 0.0 || *s.last().unwrap() != 1.0 {
            return Err(Error::InvalidSchedule("table must start at s = 0 and end at s = 1".into()));
        }
        if s.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSchedule("s samples must be strictly increasing".into()));
        }
        if g.iter().chain(j.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSchedule("non-finite table entry".into()));
        }
        let g_interp = MonotoneCubic::new(s.clone(), g.clone())?;
        let j_interp = MonotoneCubic::new(s.clone(), j.clone())?;
        Ok(ScheduleTable { s, g, j, g_interp, j_interp })
    }

    /// Parse delimited text with a header row naming the columns `s`, `g`, `j`.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| {
            headers
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::InvalidSchedule(format!("table is missing column '{name}'")))
        };
        let (is, ig, ij) = (col("s")?, col("g")?, col("j")?);
        let (mut s, mut g, mut j) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let parse = |i: usize| -> Result<f64> {
                rec.get(i).unwrap_or("").parse::<f64>().map_err(|e| {
                    Error::InvalidSchedule(format!("table row {}: {e}", row + 2))
                })
            };
            s.push(parse(is)?);
            g.push(parse(ig)?);
            j.push(parse(ij)?);
        }
        ScheduleTable::new(s, g, j)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn s(&self) -> &[f64] {
        &self.s
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn j(&self) -> &[f64] {
        &self.j
    }

    pub fn eval(&self, s: f64) -> (f64, f64) {
        (self.g_interp.eval(s), self.j_interp.eval(s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ScheduleKind {
    /// Constant `J`, `g(t) = J (1 - t / tau_q)` over `[0, tau_q]`.
    LinearRampG { j: f64 },
    /// Constant `J`, `g / J` falls linearly at rate `1 / tau_q` from
    /// `g_max_ratio` to `g_min_ratio`; the critical point sits at
    /// `t = tau_q (g_max_ratio - 1)`.
    KzRamp { j: f64, g_max_ratio: f64, g_min_ratio: f64 },
    /// Table over `s = t / tau_q`, coupling scaled by `j_max`.
    Tabulated { table: ScheduleTable, j_max: f64 },
}

/// A time-dependent protocol `(g(t), J(t))` over `[0, duration]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnealSchedule {
    kind: ScheduleKind,
    tau_q: f64,
}

impl AnnealSchedule {
    pub fn linear_ramp_g(j: f64, tau_q: f64) -> Result<Self> {
        check_positive("tau_Q", tau_q)?;
        check_positive("J", j)?;
        Ok(AnnealSchedule { kind: ScheduleKind::LinearRampG { j }, tau_q })
    }

    /// Ramp from deep in the paramagnet (`g = 2J`) down to `g = 0`.
    pub fn kz_ramp(j: f64, tau_q: f64) -> Result<Self> {
        Self::kz_ramp_window(j, tau_q, 2.0, 0.0)
    }

    pub fn kz_ramp_window(j: f64, tau_q: f64, g_max_ratio: f64, g_min_ratio: f64) -> Result<Self> {
        check_positive("tau_Q", tau_q)?;
        check_positive("J", j)?;
        if !(g_max_ratio >= 1.0 && (0.0..=1.0).contains(&g_min_ratio)) {
            return Err(Error::InvalidSchedule(format!(
                "kz_ramp window must straddle g = J (g_max/J = {g_max_ratio}, g_min/J = {g_min_ratio})"
            )));
        }
        if g_max_ratio == g_min_ratio {
            return Err(Error::InvalidSchedule("kz_ramp window is empty".into()));
        }
        Ok(AnnealSchedule { kind: ScheduleKind::KzRamp { j, g_max_ratio, g_min_ratio }, tau_q })
    }

    /// Tabulated protocol; `tau_q` is the total anneal time.
    pub fn tabulated(table: ScheduleTable, j_max: f64, tau_q: f64) -> Result<Self> {
        check_positive("tau_Q", tau_q)?;
        if j_max == 0.0 || !j_max.is_finite() {
            return Err(Error::InvalidSchedule("J_max must be finite and nonzero".into()));
        }
        Ok(AnnealSchedule { kind: ScheduleKind::Tabulated { table, j_max }, tau_q })
    }

    /// Tabulated ramp `g/J = 1 - sin(pi (s - 1/2))` from 2 to 0 whose ends
    /// start and stop with zero velocity. It crosses `g = J` at mid-anneal
    /// with local rate `1 / tau_q`, so its total duration is `pi * tau_q`.
    pub fn smooth_crossing(j: f64, tau_q: f64, n_points: usize) -> Result<Self> {
        check_positive("tau_Q", tau_q)?;
        check_positive("J", j)?;
        if n_points < 3 {
            return Err(Error::InvalidSchedule("smooth ramp needs at least 3 table points".into()));
        }
        let s: Vec<f64> = (0..n_points).map(|k| k as f64 / (n_points - 1) as f64).collect();
        let g: Vec<f64> = s
            .iter()
            .map(|&s| (1.0 - (std::f64::consts::PI * (s - 0.5)).sin()).max(0.0))
            .collect();
        let jcol = vec![1.0; n_points];
        let table = ScheduleTable::new(s, g, jcol)?;
        let mut sched = Self::tabulated(table, j, std::f64::consts::PI * tau_q)?;
        // Exact endpoints regardless of floating round-off in sin().
        if let ScheduleKind::Tabulated { table, .. } = &mut sched.kind {
            let last = table.g.len() - 1;
            table.g[0] = 2.0;
            table.g[last] = 0.0;
            table.g_interp = MonotoneCubic::new(table.s.clone(), table.g.clone())?;
        }
        Ok(sched)
    }

    pub fn kind(&self) -> &ScheduleKind {
        &self.kind
    }

    pub fn tau_q(&self) -> f64 {
        self.tau_q
    }

    /// Total anneal time.
    pub fn duration(&self) -> f64 {
        match &self.kind {
            ScheduleKind::LinearRampG { .. } | ScheduleKind::Tabulated { .. } => self.tau_q,
            ScheduleKind::KzRamp { g_max_ratio, g_min_ratio, .. } => {
                self.tau_q * (g_max_ratio - g_min_ratio)
            }
        }
    }

    pub fn evaluate(&self, t: f64) -> Result<Couplings> {
        let duration = self.duration();
        if !(t >= 0.0 && t <= duration) {
            return Err(Error::TimeOutOfRange { t, duration });
        }
        Ok(self.evaluate_unchecked(t))
    }

    /// Evaluate with `t` clamped to the schedule range; used by integrators
    /// whose last step may land a rounding error past the end.
    pub fn evaluate_clamped(&self, t: f64) -> Couplings {
        self.evaluate_unchecked(t.clamp(0.0, self.duration()))
    }

    fn evaluate_unchecked(&self, t: f64) -> Couplings {
        match &self.kind {
            ScheduleKind::LinearRampG { j } => Couplings { g: j * (1.0 - t / self.tau_q), j: *j },
            ScheduleKind::KzRamp { j, g_max_ratio, .. } => {
                Couplings { g: j * (g_max_ratio - t / self.tau_q), j: *j }
            }
            ScheduleKind::Tabulated { table, j_max } => {
                let (g, jv) = table.eval(t / self.tau_q);
                Couplings { g, j: j_max * jv }
            }
        }
    }

    /// Time measured from the critical crossing of a `kz_ramp`; in it
    /// `g/J - 1 = -t_centered / tau_q`.
    pub fn centered_time(&self, t: f64) -> Option<f64> {
        match &self.kind {
            ScheduleKind::KzRamp { g_max_ratio, .. } => Some(t - self.tau_q * (g_max_ratio - 1.0)),
            ScheduleKind::LinearRampG { .. } => Some(t),
            ScheduleKind::Tabulated { .. } => None,
        }
    }

    /// Earliest `t` with `g(t) = J(t)`, by bracketing and bisection.
    pub fn critical_crossing_time(&self) -> Result<f64> {
        match &self.kind {
            ScheduleKind::LinearRampG { .. } => return Ok(0.0),
            ScheduleKind::KzRamp { g_max_ratio, .. } => return Ok(self.tau_q * (g_max_ratio - 1.0)),
            ScheduleKind::Tabulated { .. } => {}
        }
        let duration = self.duration();
        let f = |t: f64| {
            let c = self.evaluate_unchecked(t);
            c.g - c.j.abs()
        };
        let f0 = f(0.0);
        if f0 == 0.0 {
            return Ok(0.0);
        }
        const N_BRACKET: usize = 2000;
        let mut prev_t = 0.0;
        let mut prev_f = f0;
        for k in 1..=N_BRACKET {
            let t = duration * k as f64 / N_BRACKET as f64;
            let ft = f(t);
            if ft == 0.0 {
                return Ok(t);
            }
            if ft.signum() != prev_f.signum() {
                let (mut lo, mut hi, mut flo) = (prev_t, t, prev_f);
                while hi - lo > 1e-10 * hi.abs().max(f64::MIN_POSITIVE) {
                    let mid = 0.5 * (lo + hi);
                    let fm = f(mid);
                    if fm == 0.0 {
                        return Ok(mid);
                    }
                    if fm.signum() == flo.signum() {
                        lo = mid;
                        flo = fm;
                    } else {
                        hi = mid;
                    }
                }
                return Ok(0.5 * (lo + hi));
            }
            prev_t = t;
            prev_f = ft;
        }
        Err(Error::NoCriticalCrossing)
    }

    /// Local quench time at the critical point: `1 / |d(g/J)/dt|`.
    pub fn quench_time(&self) -> Result<f64> {
        match &self.kind {
            ScheduleKind::LinearRampG { .. } | ScheduleKind::KzRamp { .. } => Ok(self.tau_q),
            ScheduleKind::Tabulated { .. } => {
                let tc = self.critical_crossing_time()?;
                let duration = self.duration();
                let dt = 1e-5 * duration;
                let (a, b) = ((tc - dt).max(0.0), (tc + dt).min(duration));
                let ratio = |t: f64| {
                    let c = self.evaluate_unchecked(t);
                    c.g / c.j.abs()
                };
                let rate = (ratio(b) - ratio(a)) / (b - a);
                if rate == 0.0 {
                    return Err(Error::InvalidSchedule("schedule is stationary at the crossing".into()));
                }
                Ok(1.0 / rate.abs())
            }
        }
    }
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSchedule(format!("{name} must be positive and finite, got {v}")))
    }
}
