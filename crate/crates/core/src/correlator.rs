//! Free-fermion quench dynamics of open chains through the two-point
//! correlators `x_pq = <c_p^dag c_q>` and `y_pq = <c_p^dag c_q^dag>`, with
//! optional `sigma^z` site dephasing of strength `gamma`.

use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorOptions, IntegratorStats, OdeSystem};
use crate::model::{AnnealSchedule, ChainInstance, Topology};
use crate::spectrum::ground_state_correlators;

/// Occupation bounds `0 <= x_pp <= 1` are monitored with this slack.
pub const OCCUPATION_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorState {
    t: f64,
    x: DMatrix<Complex64>,
    y: DMatrix<Complex64>,
}

impl CorrelatorState {
    /// All fermion modes empty: every spin along `+x`.
    pub fn vacuum(l: usize, t: f64) -> Self {
        CorrelatorState { t, x: DMatrix::zeros(l, l), y: DMatrix::zeros(l, l) }
    }

    /// Build from full matrices; only the upper triangles are read and the
    /// rest is restored by Hermiticity of `x` and antisymmetry of `y`.
    pub fn from_matrices(t: f64, x: DMatrix<Complex64>, y: DMatrix<Complex64>) -> Self {
        assert!(x.is_square() && y.shape() == x.shape(), "x and y must be equal square matrices");
        let l = x.nrows();
        let mut st = CorrelatorState { t, x, y };
        for p in 0..l {
            st.x[(p, p)] = Complex64::new(st.x[(p, p)].re, 0.0);
            st.y[(p, p)] = Complex64::new(0.0, 0.0);
            for q in p + 1..l {
                st.x[(q, p)] = st.x[(p, q)].conj();
                st.y[(q, p)] = -st.y[(p, q)];
            }
        }
        st
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }

    pub fn x(&self) -> &DMatrix<Complex64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<Complex64> {
        &self.y
    }

    /// Per-bond kink probabilities `kappa_n = 1/2 - Re(x_{n,n+1} + y_{n,n+1})`.
    pub fn bond_profile(&self) -> Vec<f64> {
        (0..self.len().saturating_sub(1))
            .map(|p| 0.5 - (self.x[(p, p + 1)] + self.y[(p, p + 1)]).re)
            .collect()
    }

    /// `(L - 1)/2 - sum_p Re(x_{p,p+1} + y_{p,p+1})`.
    pub fn kink_number(&self) -> f64 {
        let l = self.len();
        if l < 2 {
            return 0.0;
        }
        let s: f64 = (0..l - 1).map(|p| (self.x[(p, p + 1)] + self.y[(p, p + 1)]).re).sum();
        (l - 1) as f64 / 2.0 - s
    }

    /// Classical bond energy `-sum_n J_n (1 - 2 kappa_n)` with the chain's
    /// coupling magnitudes scaled by `j_scale`.
    pub fn final_energy(&self, chain: &ChainInstance, j_scale: f64) -> f64 {
        self.bond_profile()
            .iter()
            .zip(chain.couplings())
            .map(|(k, jn)| -(jn * j_scale.abs()) * (1.0 - 2.0 * k))
            .sum()
    }

    /// `Gamma = [[I - x^T, y^dag], [y, x]]`, the covariance of
    /// `(c_1..c_L, c_1^dag..c_L^dag)`.
    pub fn gaussian_correlation(&self) -> DMatrix<Complex64> {
        let l = self.len();
        let mut g = DMatrix::zeros(2 * l, 2 * l);
        for p in 0..l {
            for q in 0..l {
                let id = if p == q { 1.0 } else { 0.0 };
                g[(p, q)] = Complex64::new(id, 0.0) - self.x[(q, p)];
                g[(p, q + l)] = self.y[(q, p)].conj();
                g[(p + l, q)] = self.y[(p, q)];
                g[(p + l, q + l)] = self.x[(p, q)];
            }
        }
        g
    }

    /// Operator norm of `Gamma^2 - Gamma`; zero for a pure Gaussian state.
    pub fn purity_defect(&self) -> f64 {
        let g = self.gaussian_correlation();
        let d = &g * &g - &g;
        d.symmetric_eigenvalues().iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest amount by which some `x_pp` leaves `[0, 1]`.
    pub fn occupation_violation(&self) -> f64 {
        (0..self.len())
            .map(|p| {
                let n = self.x[(p, p)].re;
                (-n).max(n - 1.0).max(0.0)
            })
            .fold(0.0, f64::max)
    }
}

/// Index map of the packed state: `x` upper triangle with diagonal, then the
/// strict upper triangle of `y`, each entry as interleaved (re, im).
#[derive(Debug, Clone, Copy)]
struct Packing {
    l: usize,
}

impl Packing {
    fn nx(self) -> usize {
        self.l * (self.l + 1) / 2
    }

    fn ny(self) -> usize {
        self.l * (self.l - 1) / 2
    }

    fn len(self) -> usize {
        2 * (self.nx() + self.ny())
    }

    fn ix(self, p: usize, q: usize) -> usize {
        p * self.l - p * p.saturating_sub(1) / 2 + (q - p)
    }

    fn iy(self, p: usize, q: usize) -> usize {
        self.nx() + p * (self.l - 1) - p * p.saturating_sub(1) / 2 + (q - p - 1)
    }

    fn read(v: &[f64], k: usize) -> Complex64 {
        Complex64::new(v[2 * k], v[2 * k + 1])
    }

    fn write(v: &mut [f64], k: usize, z: Complex64) {
        v[2 * k] = z.re;
        v[2 * k + 1] = z.im;
    }

    /// Pack; `conjugate` stores complex-conjugated entries.
    fn pack(self, st: &CorrelatorState, conjugate: bool) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        let c = |z: Complex64| if conjugate { z.conj() } else { z };
        for p in 0..self.l {
            for q in p..self.l {
                Self::write(&mut v, self.ix(p, q), c(st.x[(p, q)]));
                if q > p {
                    Self::write(&mut v, self.iy(p, q), c(st.y[(p, q)]));
                }
            }
        }
        v
    }

    fn unpack(self, t: f64, v: &[f64], conjugate: bool) -> CorrelatorState {
        let mut x = DMatrix::zeros(self.l, self.l);
        let mut y = DMatrix::zeros(self.l, self.l);
        let c = |z: Complex64| if conjugate { z.conj() } else { z };
        for p in 0..self.l {
            for q in p..self.l {
                x[(p, q)] = c(Self::read(v, self.ix(p, q)));
                if q > p {
                    y[(p, q)] = c(Self::read(v, self.iy(p, q)));
                }
            }
        }
        CorrelatorState::from_matrices(t, x, y)
    }

    fn kinks(self, v: &[f64]) -> f64 {
        let s: f64 = (0..self.l - 1)
            .map(|p| v[2 * self.ix(p, p + 1)] + v[2 * self.iy(p, p + 1)])
            .sum();
        (self.l - 1) as f64 / 2.0 - s
    }
}

/// Right-hand side of the closed correlator equations.
///
/// The integrated variables are the complex conjugates of the physical
/// correlators: in that convention the equations read
/// `i dx/dt = F_x(x, y) + i gamma D_x`, `i dy/dt = F_y(x, y) + i gamma D_y`
/// with the hopping, pairing and field terms below. Kink numbers only
/// involve real parts and are unaffected; states handed back to callers are
/// conjugated back.
struct CorrelatorOde<'a> {
    chain: &'a ChainInstance,
    schedule: &'a AnnealSchedule,
    gamma: f64,
    pk: Packing,
    // Zero-padded (L + 2)^2 buffers indexed from 1 so that c_0 = c_{L+1} = 0.
    xf: Vec<Complex64>,
    yf: Vec<Complex64>,
    g: Vec<f64>,
    // jpad[k] = J_k with J_0 = J_L = 0.
    jpad: Vec<f64>,
}

impl<'a> CorrelatorOde<'a> {
    fn new(chain: &'a ChainInstance, schedule: &'a AnnealSchedule, gamma: f64) -> Self {
        let l = chain.len();
        CorrelatorOde {
            chain,
            schedule,
            gamma,
            pk: Packing { l },
            xf: vec![Complex64::new(0.0, 0.0); (l + 2) * (l + 2)],
            yf: vec![Complex64::new(0.0, 0.0); (l + 2) * (l + 2)],
            g: vec![0.0; l + 2],
            jpad: vec![0.0; l + 1],
        }
    }
}

impl OdeSystem for CorrelatorOde<'_> {
    fn dim(&self) -> usize {
        self.pk.len()
    }

    fn rhs(&mut self, t: f64, v: &[f64], dv: &mut [f64]) {
        let l = self.pk.l;
        let w = l + 2;
        let c = self.schedule.evaluate_clamped(t);
        for (k, gn) in self.chain.fields().iter().enumerate() {
            self.g[k + 1] = gn * c.g;
        }
        for (k, jn) in self.chain.couplings().iter().enumerate() {
            self.jpad[k + 1] = jn * c.j.abs();
        }

        for p in 0..l {
            for q in p..l {
                let xv = Packing::read(v, self.pk.ix(p, q));
                if q == p {
                    // Occupations are real; a stray imaginary part would be
                    // amplified by the dephasing term.
                    self.xf[(p + 1) * w + p + 1] = Complex64::new(xv.re, 0.0);
                    continue;
                }
                self.xf[(p + 1) * w + q + 1] = xv;
                self.xf[(q + 1) * w + p + 1] = xv.conj();
                let yv = Packing::read(v, self.pk.iy(p, q));
                self.yf[(p + 1) * w + q + 1] = yv;
                self.yf[(q + 1) * w + p + 1] = -yv;
            }
        }

        let (xf, yf, g, jp) = (&self.xf, &self.yf, &self.g, &self.jpad);
        let gamma = self.gamma;
        let at = |m: &[Complex64], r: usize, s: usize| m[r * w + s];
        for pp in 1..=l {
            let (jpp, jpm) = (jp[pp], jp[pp - 1]);
            for qq in pp..=l {
                let (jq, jqm) = (jp[qq], jp[qq - 1]);
                let xpq = at(xf, pp, qq);
                let fx = -jpp * at(xf, pp + 1, qq) - jpm * at(xf, pp - 1, qq)
                    + jq * at(xf, pp, qq + 1)
                    + jqm * at(xf, pp, qq - 1)
                    + jq * at(yf, pp, qq + 1)
                    - jqm * at(yf, pp, qq - 1)
                    + jpp * at(yf, pp + 1, qq).conj()
                    - jpm * at(yf, pp - 1, qq).conj()
                    + 2.0 * (g[pp] - g[qq]) * xpq;
                let dx = if pp == qq {
                    Complex64::new(1.0 - 2.0 * xpq.re, -2.0 * xpq.im)
                } else {
                    let ypq = at(yf, pp, qq);
                    Complex64::new(2.0 * ypq.re, 0.0) - 2.0 * (qq - pp) as f64 * xpq
                };
                let mut rate = Complex64::new(fx.im, -fx.re) + gamma * dx;
                if pp == qq {
                    rate.im = 0.0;
                }
                Packing::write(dv, self.pk.ix(pp - 1, qq - 1), rate);

                if qq > pp {
                    let ypq = at(yf, pp, qq);
                    let delta = if pp + 1 == qq { jpp } else { 0.0 };
                    let fy = -jpp * at(yf, pp + 1, qq) - jpm * at(yf, pp - 1, qq)
                        - jq * at(yf, pp, qq + 1)
                        - jqm * at(yf, pp, qq - 1)
                        - jq * at(xf, pp, qq + 1)
                        + jqm * at(xf, pp, qq - 1)
                        + jpp * at(xf, pp + 1, qq).conj()
                        - jpm * at(xf, pp - 1, qq).conj()
                        - delta
                        + 2.0 * (g[pp] + g[qq]) * ypq;
                    let dy = Complex64::new(2.0 * xpq.re, 0.0) - 2.0 * (qq - pp) as f64 * ypq;
                    let rate = Complex64::new(fy.im, -fy.re) + gamma * dy;
                    Packing::write(dv, self.pk.iy(pp - 1, qq - 1), rate);
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvolveOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Evenly spaced `(t, kinks)` samples including both ends; 0 disables.
    pub n_samples: usize,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions { rtol: 1e-9, atol: 1e-11, n_samples: 64, cancel: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MonitorFlag {
    /// Some occupation left `[0, 1]` by more than ten times the tolerance.
    OccupationBounds { max_violation: f64 },
    /// Without dephasing the final Gaussian state drifted from purity by
    /// more than ten times the expected `100 rtol`.
    PurityDrift { defect: f64 },
    /// The run ended at `g != 0`, so the bond energy is not a classical readout.
    NonClassicalReadout { final_g: f64 },
}

#[derive(Debug, Clone)]
pub struct QuenchResult {
    pub kinks: f64,
    pub final_energy: f64,
    pub bond_profile: Vec<f64>,
    pub trajectory: Vec<(f64, f64)>,
    pub stats: IntegratorStats,
    pub flags: Vec<MonitorFlag>,
    pub final_state: CorrelatorState,
}

impl QuenchResult {
    pub fn is_flagged(&self) -> bool {
        self.flags
            .iter()
            .any(|f| !matches!(f, MonitorFlag::NonClassicalReadout { .. }))
    }
}

/// Quench an open chain from the ground state at the start of `schedule`.
pub fn evolve(
    chain: &ChainInstance,
    schedule: &AnnealSchedule,
    gamma: f64,
    rtol: f64,
    atol: f64,
) -> Result<QuenchResult> {
    evolve_with(chain, schedule, gamma, &EvolveOptions { rtol, atol, ..Default::default() })
}

pub fn evolve_with(
    chain: &ChainInstance,
    schedule: &AnnealSchedule,
    gamma: f64,
    opts: &EvolveOptions,
) -> Result<QuenchResult> {
    if chain.topology() != Topology::Open {
        return Err(Error::UnsupportedTopology(
            "the correlator engine integrates open chains; use the dense oracle for rings".into(),
        ));
    }
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("dephasing rate must be >= 0, got {gamma}")));
    }
    let start = schedule.evaluate(0.0)?;
    let initial = ground_state_correlators(chain, start.g, start.j.abs())?;
    let pk = Packing { l: chain.len() };
    let mut state = pk.pack(&initial, true);
    let duration = schedule.duration();

    let samples: Vec<f64> = match opts.n_samples {
        0 => Vec::new(),
        1 => vec![duration],
        n => (0..n).map(|k| duration * k as f64 / (n - 1) as f64).collect(),
    };
    let mut trajectory = Vec::with_capacity(samples.len());
    let mut worst_occupation: f64 = 0.0;
    let integ_opts = IntegratorOptions {
        rtol: opts.rtol,
        atol: opts.atol,
        cancel: opts.cancel.clone(),
        ..Default::default()
    };
    let mut ode = CorrelatorOde::new(chain, schedule, gamma);
    let stats = integrate(&mut ode, 0.0, &mut state, duration, &samples, &integ_opts, |t, v| {
        trajectory.push((t, pk.kinks(v)));
        for p in 0..pk.l {
            let n = v[2 * pk.ix(p, p)];
            worst_occupation = worst_occupation.max(-n).max(n - 1.0);
        }
        true
    })?;

    let final_state = pk.unpack(duration, &state, true);
    let end = schedule.evaluate(duration)?;
    let mut flags = Vec::new();
    worst_occupation = worst_occupation.max(final_state.occupation_violation());
    if worst_occupation > 10.0 * OCCUPATION_TOLERANCE {
        flags.push(MonitorFlag::OccupationBounds { max_violation: worst_occupation });
    }
    if gamma == 0.0 {
        let defect = final_state.purity_defect();
        if defect > 10.0 * 100.0 * opts.rtol {
            flags.push(MonitorFlag::PurityDrift { defect });
        }
    }
    if end.g != 0.0 {
        flags.push(MonitorFlag::NonClassicalReadout { final_g: end.g });
    }
    Ok(QuenchResult {
        kinks: final_state.kink_number(),
        final_energy: final_state.final_energy(chain, end.j),
        bond_profile: final_state.bond_profile(),
        trajectory,
        stats,
        flags,
        final_state,
    })
}

pub fn write_trajectory<W: std::io::Write>(trajectory: &[(f64, f64)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["t", "kinks"])?;
    for (t, k) in trajectory {
        w.write_record([t.to_string(), k.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn packing_is_a_bijection() {
        for l in 2..9 {
            let pk = Packing { l };
            let mut seen = vec![false; pk.nx() + pk.ny()];
            for p in 0..l {
                for q in p..l {
                    assert!(!std::mem::replace(&mut seen[pk.ix(p, q)], true));
                    if q > p {
                        assert!(!std::mem::replace(&mut seen[pk.iy(p, q)], true));
                    }
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }

    #[test]
    fn pack_round_trip() {
        let l = 5;
        let x = DMatrix::from_fn(l, l, |p, q| Complex64::new((p + q) as f64, p as f64 - q as f64));
        let y = DMatrix::from_fn(l, l, |p, q| Complex64::new(q as f64 - p as f64, 0.3 * (q as f64 - p as f64)));
        let st = CorrelatorState::from_matrices(0.0, x, y);
        let pk = Packing { l };
        let back = pk.unpack(0.0, &pk.pack(&st, true), true);
        assert_eq!(back, st);
        assert!((pk.kinks(&pk.pack(&st, false)) - st.kink_number()).abs() < 1e-12);
    }

    #[test]
    fn vacuum_has_half_kink_per_bond() {
        let st = CorrelatorState::vacuum(6, 0.0);
        assert_eq!(st.kink_number(), 2.5);
        assert!(st.purity_defect() < 1e-15);
    }

    #[test]
    fn energy_of_defect_free_state() {
        let chain = ChainInstance::uniform(4, Topology::Open).unwrap();
        let st = ground_state_correlators(&chain, 1e-7, 1.0).unwrap();
        assert!((st.final_energy(&chain, 1.0) + 3.0).abs() < 1e-9);
        assert!(CorrelatorState::vacuum(4, 0.0).final_energy(&chain, 1.0).abs() < 1e-15);
    }

    #[test]
    fn kinks_equal_bond_sum() {
        let chain = ChainInstance::uniform(8, Topology::Open).unwrap();
        let sched = AnnealSchedule::linear_ramp_g(1.0, 3.0).unwrap();
        let r = evolve(&chain, &sched, 0.05, 1e-9, 1e-11).unwrap();
        let s: f64 = r.bond_profile.iter().sum();
        assert!((s - r.kinks).abs() < 1e-10);
        assert!(r.bond_profile.iter().all(|&k| (0.0..=1.0).contains(&k)));
        assert_eq!(r.trajectory.len(), 64);
        assert!((r.trajectory.last().unwrap().1 - r.kinks).abs() < 1e-12);
    }

    #[test]
    fn rejects_rings() {
        let chain = ChainInstance::uniform(6, Topology::Periodic).unwrap();
        let sched = AnnealSchedule::linear_ramp_g(1.0, 3.0).unwrap();
        assert!(matches!(
            evolve(&chain, &sched, 0.0, 1e-9, 1e-11),
            Err(Error::UnsupportedTopology(_))
        ));
    }

    #[test]
    fn pure_evolution_stays_gaussian() {
        let chain = ChainInstance::uniform(10, Topology::Open).unwrap();
        let sched = AnnealSchedule::kz_ramp(1.0, 2.0).unwrap();
        let r = evolve(&chain, &sched, 0.0, 1e-9, 1e-11).unwrap();
        assert!(r.final_state.purity_defect() <= 100.0 * 1e-9);
        assert!(!r.is_flagged());
    }

    #[test]
    fn slow_quench_is_adiabatic() {
        let chain = ChainInstance::uniform(10, Topology::Open).unwrap();
        let tau_ad = 100.0 / (2.0 * std::f64::consts::PI.powi(3));
        let sched = AnnealSchedule::kz_ramp(1.0, 50.0 * tau_ad).unwrap();
        let r = evolve(&chain, &sched, 0.0, 1e-9, 1e-11).unwrap();
        assert!(r.kinks < 1e-3, "kinks {}", r.kinks);
    }

    #[test]
    fn long_dephased_run_stays_bounded() {
        // gamma * t = 30: any growing mode would swamp the state.
        let chain = ChainInstance::uniform(4, Topology::Open).unwrap();
        let sched = AnnealSchedule::linear_ramp_g(1.0, 300.0).unwrap();
        let r = evolve(&chain, &sched, 0.1, 1e-8, 1e-10).unwrap();
        assert!(!r.is_flagged(), "{:?}", r.flags);
        assert!((r.kinks - 1.5).abs() < 0.05, "kinks {}", r.kinks);
    }
}

