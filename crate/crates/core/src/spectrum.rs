//! Free-fermion statics: Bogoliubov-de Gennes matrices, ground-state
//! correlators and excitation gaps.
//!
//! After the Jordan-Wigner map `sigma^x_n = 1 - 2 c_n^dag c_n`,
//! `sigma^z_n = (c_n^dag + c_n) prod_{m<n} (1 - 2 c_m^dag c_m)` the chain
//! Hamiltonian becomes
//! `H = sum_ij A_ij c_i^dag c_j + 1/2 sum_ij B_ij (c_i^dag c_j^dag + h.c.) - sum_n g_n`
//! with `A_nn = 2 g_n`, `A_{n,n+1} = A_{n+1,n} = -J_n`,
//! `B_{n,n+1} = -J_n = -B_{n+1,n}`. On a ring the even-parity sector sees
//! the closing bond with reversed sign (antiperiodic fermions).

use std::io::Write;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::correlator::CorrelatorState;
use crate::error::{Error, Result};
use crate::model::{site_coefficients, AnnealSchedule, ChainInstance, Couplings, Topology};

/// `2L x 2L` Nambu-form matrix `[[A, B], [-B, -A]]` acting on
/// `(c_1, ..., c_L, c_1^dag, ..., c_L^dag)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BdgMatrix {
    l: usize,
    matrix: DMatrix<f64>,
}

impl BdgMatrix {
    pub fn new(chain: &ChainInstance, g: f64, j: f64) -> Self {
        let (a, b) = coupling_blocks(chain, g, j);
        let l = chain.len();
        let mut m = DMatrix::zeros(2 * l, 2 * l);
        for r in 0..l {
            for c in 0..l {
                m[(r, c)] = a[(r, c)];
                m[(r, c + l)] = b[(r, c)];
                m[(r + l, c)] = -b[(r, c)];
                m[(r + l, c + l)] = -a[(r, c)];
            }
        }
        BdgMatrix { l, matrix: m }
    }

    pub fn sites(&self) -> usize {
        self.l
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Ascending eigenvalues.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.matrix.clone().symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// Largest violation of the `+-epsilon` pairing, relative to the matrix norm.
    pub fn pairing_defect(&self) -> f64 {
        let ev = self.eigenvalues();
        let n = ev.len();
        let scale = self.matrix.norm().max(f64::MIN_POSITIVE);
        (0..n).map(|i| (ev[i] + ev[n - 1 - i]).abs()).fold(0.0, f64::max) / scale
    }
}

/// Blocks `A` (symmetric) and `B` (antisymmetric) at field scale `g` and
/// coupling scale `j`.
pub fn coupling_blocks(chain: &ChainInstance, g: f64, j: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let l = chain.len();
    let (gs, js) = site_coefficients(chain, Couplings { g, j });
    let mut a = DMatrix::zeros(l, l);
    let mut b = DMatrix::zeros(l, l);
    for (n, &gn) in gs.iter().enumerate() {
        a[(n, n)] = 2.0 * gn;
    }
    for (n, (p, q)) in chain.bonds().enumerate() {
        let jn = js[n];
        if q > p {
            a[(p, q)] -= jn;
            a[(q, p)] -= jn;
            b[(p, q)] -= jn;
            b[(q, p)] += jn;
        } else {
            // Closing bond of a ring, even-parity sector.
            a[(p, q)] += jn;
            a[(q, p)] += jn;
            b[(p, q)] += jn;
            b[(q, p)] -= jn;
        }
    }
    (a, b)
}

/// Quasiparticle energies (singular values of `A - B`), ascending.
pub fn quasiparticle_energies(chain: &ChainInstance, g: f64, j: f64) -> Vec<f64> {
    let (a, b) = coupling_blocks(chain, g, j);
    let mut sv: Vec<f64> = (a - b).singular_values().iter().copied().collect();
    sv.sort_by(f64::total_cmp);
    sv
}

/// Gap to the lowest excitation reachable by a parity-conserving quench:
/// the two cheapest quasiparticles of the even-parity sector.
pub fn instantaneous_gap(chain: &ChainInstance, g: f64, j: f64) -> f64 {
    let e = quasiparticle_energies(chain, g, j);
    match e.len() {
        0 => 0.0,
        1 => e[0],
        _ => e[0] + e[1],
    }
}

/// Ground-state correlators `x_pq = <c_p^dag c_q>`, `y_pq = <c_p^dag c_q^dag>`
/// of an open chain at field scale `g` and coupling scale `j`.
pub fn ground_state_correlators(chain: &ChainInstance, g: f64, j: f64) -> Result<CorrelatorState> {
    if chain.topology() != Topology::Open {
        return Err(Error::UnsupportedTopology(
            "correlator ground states are built for open chains only".into(),
        ));
    }
    if !(g >= 0.0 && j >= 0.0) || (g == 0.0 && j == 0.0) {
        return Err(Error::InvalidArgument(format!(
            "need g, J >= 0 and not both zero (g = {g}, J = {j})"
        )));
    }
    let l = chain.len();
    if j == 0.0 || chain.couplings().iter().all(|&v| v == 0.0) {
        return Ok(CorrelatorState::vacuum(l, 0.0));
    }
    if g == 0.0 || chain.fields().iter().any(|&v| v == 0.0) {
        return Err(Error::DegenerateGroundState(
            "a vanishing transverse field leaves a degenerate ferromagnetic ground space; start at g > 0"
                .into(),
        ));
    }
    let (a, b) = coupling_blocks(chain, g, j);
    let svd = (a - b).svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    // Polar factor of A - B. Deep in the ordered phase the edge mode is
    // exponentially soft and the two parity states are numerically
    // degenerate; either one is kink-free.
    let pol = &u * &v_t;
    let mut x = DMatrix::<Complex64>::zeros(l, l);
    let mut y = DMatrix::<Complex64>::zeros(l, l);
    for p in 0..l {
        for q in 0..l {
            let id = if p == q { 0.5 } else { 0.0 };
            x[(p, q)] = Complex64::new(id - 0.25 * (pol[(p, q)] + pol[(q, p)]), 0.0);
            y[(p, q)] = Complex64::new(0.25 * (pol[(p, q)] - pol[(q, p)]), 0.0);
        }
    }
    Ok(CorrelatorState::from_matrices(0.0, x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapScan {
    pub samples: Vec<(f64, f64)>,
    pub s_c: f64,
    pub gap_at_s_c: f64,
    /// The minimum sits at an end of the schedule rather than inside it.
    pub boundary_minimum: bool,
}

/// Scan the gap along `schedule` at `n_samples` evenly spaced values of
/// `s = t / duration`, then refine the minimum by golden-section search.
pub fn gap_scan(chain: &ChainInstance, schedule: &AnnealSchedule, n_samples: usize) -> Result<GapScan> {
    if n_samples < 3 {
        return Err(Error::InvalidArgument(format!("gap scan needs >= 3 samples, got {n_samples}")));
    }
    let duration = schedule.duration();
    let gap_at = |s: f64| {
        let c = schedule.evaluate_clamped(s * duration);
        instantaneous_gap(chain, c.g, c.j.abs())
    };
    let samples: Vec<(f64, f64)> = (0..n_samples)
        .map(|k| {
            let s = k as f64 / (n_samples - 1) as f64;
            (s, gap_at(s))
        })
        .collect();
    let k_min = samples
        .iter()
        .enumerate()
        .min_by(|a, b| a.1 .1.total_cmp(&b.1 .1))
        .map(|(k, _)| k)
        .unwrap();
    let lo = samples[k_min.saturating_sub(1)].0;
    let hi = samples[(k_min + 1).min(n_samples - 1)].0;
    let (s_c, gap_c) = golden_section(gap_at, lo, hi, 1e-8);
    let (s_c, gap_c) = if samples[k_min].1 < gap_c { samples[k_min] } else { (s_c, gap_c) };
    let boundary_minimum = s_c <= 1e-6 || s_c >= 1.0 - 1e-6;
    Ok(GapScan { samples, s_c, gap_at_s_c: gap_c, boundary_minimum })
}

fn golden_section(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while b - a > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let s = 0.5 * (a + b);
    let (fa, fb, fs) = (f(a), f(b), f(s));
    [(a, fa), (b, fb), (s, fs)].into_iter().min_by(|x, y| x.1.total_cmp(&y.1)).unwrap()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub l: usize,
    pub s_c: f64,
    pub gap: f64,
}

/// Minimal gap along `schedule` for uniform chains of each length.
pub fn gap_vs_length(
    lengths: &[usize],
    topology: Topology,
    schedule: &AnnealSchedule,
    n_samples: usize,
) -> Result<Vec<GapRow>> {
    lengths
        .iter()
        .map(|&l| {
            let chain = ChainInstance::uniform(l, topology)?;
            let scan = gap_scan(&chain, schedule, n_samples)?;
            Ok(GapRow { l, s_c: scan.s_c, gap: scan.gap_at_s_c })
        })
        .collect()
}

pub fn write_gap_scan<W: Write>(scan: &GapScan, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["s", "gap"])?;
    for (s, gap) in &scan.samples {
        w.write_record([s.to_string(), gap.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_gap_table<W: Write>(rows: &[GapRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["L", "s_c", "gap"])?;
    for r in rows {
        w.write_record([r.l.to_string(), r.s_c.to_string(), r.gap.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
