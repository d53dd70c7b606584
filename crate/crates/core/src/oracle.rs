//! Dense many-body reference engine for small chains.
//!
//! Basis states are `sigma^z` products; site `n` (zero-based) is bit
//! `L - 1 - n` of the basis index (site 0 most significant) and a clear bit
//! means spin up.

use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::correlator::CorrelatorState;
use crate::error::{Error, Result};
use crate::integrator::{integrate, IntegratorOptions, IntegratorStats, OdeSystem};
use crate::model::{site_coefficients, AnnealSchedule, ChainInstance, Couplings};

pub const DEFAULT_MAX_PURE: usize = 12;
pub const DEFAULT_MAX_MIXED: usize = 7;
/// Eigenvalues closer than this (relative to the spectral scale) are one level.
pub const DEGENERACY_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DephasingMode {
    /// `D[rho] = -1/2 sum_n [sigma^z_n, [sigma^z_n, rho]]`.
    SiteDephasing,
    /// Coherences between distinct instantaneous energy levels decay at
    /// rate `gamma`: `D[rho] = sum_k P_k rho P_k - rho`.
    EigenbasisDephasing,
}

#[derive(Debug, Clone, PartialEq)]
pub enum DenseState {
    Pure { t: f64, l: usize, psi: DVector<Complex64> },
    Mixed { t: f64, l: usize, rho: DMatrix<Complex64> },
}

impl DenseState {
    pub fn t(&self) -> f64 {
        match self {
            DenseState::Pure { t, .. } | DenseState::Mixed { t, .. } => *t,
        }
    }

    pub fn sites(&self) -> usize {
        match self {
            DenseState::Pure { l, .. } | DenseState::Mixed { l, .. } => *l,
        }
    }

    /// Basis-state probabilities.
    pub fn populations(&self) -> Vec<f64> {
        match self {
            DenseState::Pure { psi, .. } => psi.iter().map(|a| a.norm_sqr()).collect(),
            DenseState::Mixed { rho, .. } => (0..rho.nrows()).map(|i| rho[(i, i)].re).collect(),
        }
    }

    pub fn density_matrix(&self) -> DMatrix<Complex64> {
        match self {
            DenseState::Pure { psi, .. } => psi * psi.adjoint(),
            DenseState::Mixed { rho, .. } => rho.clone(),
        }
    }

    pub fn basis_state(l: usize, index: usize) -> Self {
        let mut psi = DVector::zeros(1 << l);
        psi[index] = Complex64::new(1.0, 0.0);
        DenseState::Pure { t: 0.0, l, psi }
    }

    /// Product state from `sigma^z` values per site (`true` = up).
    pub fn product_state(spins_up: &[bool]) -> Self {
        let l = spins_up.len();
        let index = spins_up
            .iter()
            .enumerate()
            .filter(|(_, &up)| !up)
            .fold(0usize, |acc, (n, _)| acc | (1 << (l - 1 - n)));
        Self::basis_state(l, index)
    }

    pub fn maximally_mixed(l: usize) -> Self {
        let n = 1 << l;
        let rho = DMatrix::from_diagonal_element(n, n, Complex64::new(1.0 / n as f64, 0.0));
        DenseState::Mixed { t: 0.0, l, rho }
    }

    pub fn norm_defect(&self) -> f64 {
        match self {
            DenseState::Pure { psi, .. } => (psi.norm() - 1.0).abs(),
            DenseState::Mixed { rho, .. } => (rho.trace().re - 1.0).abs(),
        }
    }

    /// Smallest eigenvalue of the density matrix (0 for pure states).
    pub fn min_eigenvalue(&self) -> f64 {
        match self {
            DenseState::Pure { .. } => 0.0,
            DenseState::Mixed { rho, .. } => {
                rho.clone().symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
            }
        }
    }
}

#[inline]
fn site_mask(l: usize, n: usize) -> usize {
    1 << (l - 1 - n)
}

/// Bond endpoint masks and coefficient buffers for fast application of H.
struct Layout {
    l: usize,
    bond_masks: Vec<(usize, usize)>,
}

impl Layout {
    fn new(chain: &ChainInstance) -> Self {
        let l = chain.len();
        let bond_masks = chain.bonds().map(|(p, q)| (site_mask(l, p), site_mask(l, q))).collect();
        Layout { l, bond_masks }
    }

    /// Ising energies `-sum_n J_n s_n s_{n+1}` of every basis state.
    fn diagonal(&self, js: &[f64], out: &mut [f64]) {
        for (i, d) in out.iter_mut().enumerate() {
            *d = -self
                .bond_masks
                .iter()
                .zip(js)
                .map(|(&(mp, mq), &j)| if ((i & mp) == 0) == ((i & mq) == 0) { j } else { -j })
                .sum::<f64>();
        }
    }
}

fn check_cap(l: usize, cap: usize) -> Result<()> {
    if l > cap {
        Err(Error::SizeCap { l, cap })
    } else {
        Ok(())
    }
}

/// `H = -sum_n g_n sigma^x_n - sum_bonds J_n sigma^z_n sigma^z_m` at field
/// scale `g` and coupling scale `j`, as a dense real matrix.
pub fn dense_hamiltonian(chain: &ChainInstance, g: f64, j: f64) -> Result<DMatrix<f64>> {
    dense_hamiltonian_capped(chain, g, j, DEFAULT_MAX_PURE)
}

pub fn dense_hamiltonian_capped(chain: &ChainInstance, g: f64, j: f64, cap: usize) -> Result<DMatrix<f64>> {
    let l = chain.len();
    check_cap(l, cap)?;
    let n = 1usize << l;
    let (gs, js) = site_coefficients(chain, Couplings { g, j: j.abs() });
    let layout = Layout::new(chain);
    let mut diag = vec![0.0; n];
    layout.diagonal(&js, &mut diag);
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        h[(i, i)] = diag[i];
        for (site, &gn) in gs.iter().enumerate() {
            h[(i ^ site_mask(l, site), i)] -= gn;
        }
    }
    Ok(h)
}

/// Eigenvalues ascending with eigenvectors in matching column order.
fn sorted_eigen(h: DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(h);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(eig.eigenvectors.nrows(), order.len(), |r, c| {
        eig.eigenvectors[(r, order[c])]
    });
    (values, vectors)
}

fn degeneracy_tolerance(values: &[f64]) -> f64 {
    let scale = values.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    DEGENERACY_TOLERANCE * scale
}

/// Difference between the two lowest distinct eigenvalues.
pub fn exact_gap(chain: &ChainInstance, g: f64, j: f64) -> Result<f64> {
    let (values, _) = sorted_eigen(dense_hamiltonian(chain, g, j)?);
    let tol = degeneracy_tolerance(&values);
    Ok(values.iter().find(|&&v| v - values[0] > tol).map_or(0.0, |v| v - values[0]))
}

/// Lowest excitation energy inside the sector `prod_n sigma^x_n = +1`,
/// which every schedule preserves.
pub fn even_sector_gap(chain: &ChainInstance, g: f64, j: f64) -> Result<f64> {
    let h = dense_hamiltonian(chain, g, j)?;
    let l = chain.len();
    let full = (1usize << l) - 1;
    // States (|i> + |~i>)/sqrt(2) with the first site's bit clear.
    let reps: Vec<usize> = (0..1usize << l).filter(|&i| i & site_mask(l, 0) == 0).collect();
    let m = reps.len();
    let hs = DMatrix::from_fn(m, m, |a, b| {
        let (i, k) = (reps[a], reps[b]);
        h[(i, k)] + h[(i, k ^ full)]
    });
    let (values, _) = sorted_eigen(hs);
    Ok(values[1] - values[0])
}

/// `<sum_bonds (1 - sigma^z_n sigma^z_m) / 2>`.
pub fn kink_expectation(state: &DenseState, chain: &ChainInstance) -> f64 {
    let layout = Layout::new(chain);
    state
        .populations()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let broken = layout
                .bond_masks
                .iter()
                .filter(|&&(mp, mq)| ((i & mp) == 0) != ((i & mq) == 0))
                .count();
            p * broken as f64
        })
        .sum()
}

/// Per-bond kink probabilities.
pub fn bond_profile(state: &DenseState, chain: &ChainInstance) -> Vec<f64> {
    let layout = Layout::new(chain);
    let pops = state.populations();
    layout
        .bond_masks
        .iter()
        .map(|&(mp, mq)| {
            pops.iter()
                .enumerate()
                .filter(|(i, _)| ((i & mp) == 0) != ((i & mq) == 0))
                .map(|(_, p)| p)
                .sum()
        })
        .collect()
}

/// `-sum_n |J_n| (1 - 2 kappa_n)` with couplings scaled by `j_scale`.
pub fn bond_energy(state: &DenseState, chain: &ChainInstance, j_scale: f64) -> f64 {
    bond_profile(state, chain)
        .iter()
        .zip(chain.couplings())
        .map(|(k, jn)| -(jn * j_scale.abs()) * (1.0 - 2.0 * k))
        .sum()
}

/// `1 - <P_ground>` for the (possibly degenerate) ground space of `H(g, j)`.
pub fn excitation_probability(state: &DenseState, chain: &ChainInstance, g: f64, j: f64) -> Result<f64> {
    let (values, vectors) = sorted_eigen(dense_hamiltonian(chain, g, j)?);
    let tol = degeneracy_tolerance(&values);
    let n_ground = values.iter().take_while(|&&v| v - values[0] <= tol).count();
    let rho = state.density_matrix();
    let mut weight = 0.0;
    for k in 0..n_ground {
        let v = vectors.column(k).map(|a| Complex64::new(a, 0.0));
        weight += (v.adjoint() * &rho * &v)[(0, 0)].re;
    }
    Ok((1.0 - weight).clamp(0.0, 1.0))
}

fn ground_state(chain: &ChainInstance, c: Couplings) -> Result<DVector<f64>> {
    let (values, vectors) = sorted_eigen(dense_hamiltonian_capped(chain, c.g, c.j, usize::MAX)?);
    if values.len() > 1 && values[1] - values[0] <= degeneracy_tolerance(&values) {
        return Err(Error::DegenerateGroundState(format!(
            "initial Hamiltonian has a degenerate ground level (g = {}, J = {})",
            c.g, c.j
        )));
    }
    Ok(vectors.column(0).into_owned())
}

/// Apply `c_n` (or `c_n^dag`) to a state vector.
fn apply_fermion(l: usize, n: usize, dagger: bool, v: &[Complex64], out: &mut [Complex64]) {
    let string: usize = (0..n).map(|m| site_mask(l, m)).sum();
    let bit = site_mask(l, n);
    for (i, o) in out.iter_mut().enumerate() {
        let src = i ^ string;
        let (up, down) = (v[src & !bit], v[src | bit]);
        *o = match (dagger, i & bit == 0) {
            (false, _) => 0.5 * (up - down),
            (true, true) => 0.5 * (up + down),
            (true, false) => -0.5 * (up + down),
        };
    }
}

/// Jordan-Wigner correlators `x_pq = <c_p^dag c_q>` and `y_pq = <c_p^dag c_q^dag>`.
pub fn jw_correlators(state: &DenseState) -> CorrelatorState {
    let l = state.sites();
    let dim = 1usize << l;
    let mut x = DMatrix::zeros(l, l);
    let mut y = DMatrix::zeros(l, l);
    let zero = Complex64::new(0.0, 0.0);
    match state {
        DenseState::Pure { psi, .. } => {
            let psi = psi.as_slice();
            let mut c: Vec<Vec<Complex64>> = vec![vec![zero; dim]; l];
            let mut cd: Vec<Vec<Complex64>> = vec![vec![zero; dim]; l];
            for n in 0..l {
                apply_fermion(l, n, false, psi, &mut c[n]);
                apply_fermion(l, n, true, psi, &mut cd[n]);
            }
            let inner = |a: &[Complex64], b: &[Complex64]| -> Complex64 {
                a.iter().zip(b).map(|(u, v)| u.conj() * v).sum()
            };
            for p in 0..l {
                for q in 0..l {
                    x[(p, q)] = inner(&c[p], &c[q]);
                    y[(p, q)] = inner(&c[p], &cd[q]);
                }
            }
        }
        DenseState::Mixed { rho, .. } => {
            // Dense c_n: column k is c_n applied to basis state k.
            let mut ops = Vec::with_capacity(l);
            let mut e = vec![zero; dim];
            let mut col = vec![zero; dim];
            for n in 0..l {
                let mut m = DMatrix::zeros(dim, dim);
                for k in 0..dim {
                    e.iter_mut().for_each(|v| *v = zero);
                    e[k] = Complex64::new(1.0, 0.0);
                    apply_fermion(l, n, false, &e, &mut col);
                    for r in 0..dim {
                        m[(r, k)] = col[r];
                    }
                }
                ops.push(m);
            }
            for p in 0..l {
                for q in 0..l {
                    let cp_dag = ops[p].adjoint();
                    x[(p, q)] = (&cp_dag * &ops[q] * rho).trace();
                    y[(p, q)] = (&cp_dag * ops[q].adjoint() * rho).trace();
                }
            }
        }
    }
    CorrelatorState::from_matrices(state.t(), x, y)
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub rtol: f64,
    pub atol: f64,
    pub max_pure: usize,
    pub max_mixed: usize,
    /// Evenly spaced `(t, kinks)` samples including both ends; 0 disables.
    pub n_samples: usize,
    pub cancel: Option<Arc<AtomicBool>>,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            rtol: 1e-9,
            atol: 1e-11,
            max_pure: DEFAULT_MAX_PURE,
            max_mixed: DEFAULT_MAX_MIXED,
            n_samples: 0,
            cancel: None,
        }
    }
}

impl OracleOptions {
    pub fn with_tolerances(rtol: f64, atol: f64) -> Self {
        OracleOptions { rtol, atol, ..Default::default() }
    }

    fn integrator(&self) -> IntegratorOptions {
        IntegratorOptions {
            rtol: self.rtol,
            atol: self.atol,
            cancel: self.cancel.clone(),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OracleFlag {
    NormDrift { defect: f64 },
    Positivity { min_eigenvalue: f64 },
}

#[derive(Debug, Clone)]
pub struct OracleRun {
    pub state: DenseState,
    pub stats: IntegratorStats,
    pub trajectory: Vec<(f64, f64)>,
    pub flags: Vec<OracleFlag>,
}

fn sample_times(duration: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![duration],
        n => (0..n).map(|k| duration * k as f64 / (n - 1) as f64).collect(),
    }
}

struct Schrodinger<'a> {
    chain: &'a ChainInstance,
    schedule: &'a AnnealSchedule,
    layout: Layout,
    diag: Vec<f64>,
    g: Vec<f64>,
    j: Vec<f64>,
}

impl<'a> Schrodinger<'a> {
    fn new(chain: &'a ChainInstance, schedule: &'a AnnealSchedule) -> Self {
        let l = chain.len();
        Schrodinger {
            chain,
            schedule,
            layout: Layout::new(chain),
            diag: vec![0.0; 1 << l],
            g: vec![0.0; l],
            j: vec![0.0; chain.n_bonds()],
        }
    }

    fn refresh(&mut self, t: f64) {
        let c = self.schedule.evaluate_clamped(t);
        for (d, s) in self.g.iter_mut().zip(self.chain.fields()) {
            *d = s * c.g;
        }
        for (d, s) in self.j.iter_mut().zip(self.chain.couplings()) {
            *d = s * c.j.abs();
        }
        self.layout.diagonal(&self.j, &mut self.diag);
    }
}

impl OdeSystem for Schrodinger<'_> {
    fn dim(&self) -> usize {
        2 * self.diag.len()
    }

    fn rhs(&mut self, t: f64, v: &[f64], dv: &mut [f64]) {
        self.refresh(t);
        let l = self.layout.l;
        for i in 0..self.diag.len() {
            let mut hr = self.diag[i] * v[2 * i];
            let mut hi = self.diag[i] * v[2 * i + 1];
            for (n, &gn) in self.g.iter().enumerate() {
                let k = i ^ site_mask(l, n);
                hr -= gn * v[2 * k];
                hi -= gn * v[2 * k + 1];
            }
            // d psi / dt = -i H psi
            dv[2 * i] = hi;
            dv[2 * i + 1] = -hr;
        }
    }
}

fn kinks_from_populations(layout: &Layout, pops: impl Iterator<Item = (usize, f64)>) -> f64 {
    pops.map(|(i, p)| {
        let broken = layout
            .bond_masks
            .iter()
            .filter(|&&(mp, mq)| ((i & mp) == 0) != ((i & mq) == 0))
            .count();
        p * broken as f64
    })
    .sum()
}

/// Schrodinger evolution from the ground state at the start of `schedule`.
pub fn evolve_pure(chain: &ChainInstance, schedule: &AnnealSchedule, opts: &OracleOptions) -> Result<OracleRun> {
    let l = chain.len();
    check_cap(l, opts.max_pure)?;
    let psi0 = ground_state(chain, schedule.evaluate(0.0)?)?;
    let mut v: Vec<f64> = psi0.iter().flat_map(|&a| [a, 0.0]).collect();
    let duration = schedule.duration();
    let mut sys = Schrodinger::new(chain, schedule);
    let layout = Layout::new(chain);
    let mut trajectory = Vec::new();
    let stats = integrate(
        &mut sys,
        0.0,
        &mut v,
        duration,
        &sample_times(duration, opts.n_samples),
        &opts.integrator(),
        |t, s| {
            let pops = (0..s.len() / 2).map(|i| (i, s[2 * i] * s[2 * i] + s[2 * i + 1] * s[2 * i + 1]));
            trajectory.push((t, kinks_from_populations(&layout, pops)));
            true
        },
    )?;
    let psi = DVector::from_iterator(v.len() / 2, v.chunks(2).map(|c| Complex64::new(c[0], c[1])));
    let state = DenseState::Pure { t: duration, l, psi };
    let mut flags = Vec::new();
    let defect = state.norm_defect();
    if defect > 10.0 * opts.rtol {
        flags.push(OracleFlag::NormDrift { defect });
    }
    Ok(OracleRun { state, stats, trajectory, flags })
}

/// Packed upper triangle (with diagonal) of a Hermitian matrix.
#[derive(Debug, Clone, Copy)]
struct HermitianPacking {
    n: usize,
}

impl HermitianPacking {
    fn len(self) -> usize {
        self.n * (self.n + 1)
    }

    fn idx(self, i: usize, j: usize) -> usize {
        i * self.n - i * i.saturating_sub(1) / 2 + (j - i)
    }

    fn pack(self, m: &DMatrix<Complex64>) -> Vec<f64> {
        let mut v = vec![0.0; self.len()];
        for i in 0..self.n {
            for j in i..self.n {
                let k = self.idx(i, j);
                v[2 * k] = m[(i, j)].re;
                v[2 * k + 1] = if i == j { 0.0 } else { m[(i, j)].im };
            }
        }
        v
    }

    fn unpack_into(self, v: &[f64], m: &mut DMatrix<Complex64>) {
        for i in 0..self.n {
            for j in i..self.n {
                let k = self.idx(i, j);
                let z = Complex64::new(v[2 * k], if i == j { 0.0 } else { v[2 * k + 1] });
                m[(i, j)] = z;
                m[(j, i)] = z.conj();
            }
        }
    }
}

struct Lindblad<'a> {
    inner: Schrodinger<'a>,
    gamma: f64,
    mode: DephasingMode,
    pk: HermitianPacking,
    rho: DMatrix<Complex64>,
    hamming: Vec<u32>,
}

impl<'a> Lindblad<'a> {
    fn dephasing_eigen(&self, t: f64) -> DMatrix<Complex64> {
        let c = self.inner.schedule.evaluate_clamped(t);
        let h = dense_hamiltonian_capped(self.inner.chain, c.g, c.j, usize::MAX)
            .expect("cap checked on entry");
        let (values, vectors) = sorted_eigen(h);
        let tol = degeneracy_tolerance(&values);
        let mut level = vec![0usize; values.len()];
        for k in 1..values.len() {
            level[k] = level[k - 1] + usize::from(values[k] - values[k - 1] > tol);
        }
        let re = self.rho.map(|z| z.re);
        let im = self.rho.map(|z| z.im);
        let vt = vectors.transpose();
        let mut tr = &vt * re * &vectors;
        let mut ti = &vt * im * &vectors;
        for a in 0..values.len() {
            for b in 0..values.len() {
                if level[a] != level[b] {
                    tr[(a, b)] = 0.0;
                    ti[(a, b)] = 0.0;
                }
            }
        }
        let br = &vectors * tr * &vt;
        let bi = &vectors * ti * &vt;
        DMatrix::from_fn(self.rho.nrows(), self.rho.ncols(), |r, c| {
            Complex64::new(br[(r, c)], bi[(r, c)]) - self.rho[(r, c)]
        })
    }
}

impl OdeSystem for Lindblad<'_> {
    fn dim(&self) -> usize {
        self.pk.len()
    }

    fn rhs(&mut self, t: f64, v: &[f64], dv: &mut [f64]) {
        self.inner.refresh(t);
        self.pk.unpack_into(v, &mut self.rho);
        let n = self.pk.n;
        let l = self.inner.layout.l;
        let eigen = match self.mode {
            DephasingMode::EigenbasisDephasing if self.gamma != 0.0 => Some(self.dephasing_eigen(t)),
            _ => None,
        };
        let rho = &self.rho;
        for i in 0..n {
            for j in i..n {
                // [H, rho]_ij = (d_i - d_j) rho_ij - sum_n g_n (rho_{i^m, j} - rho_{i, j^m})
                let mut comm = (self.inner.diag[i] - self.inner.diag[j]) * rho[(i, j)];
                for (site, &gn) in self.inner.g.iter().enumerate() {
                    let m = site_mask(l, site);
                    comm -= gn * (rho[(i ^ m, j)] - rho[(i, j ^ m)]);
                }
                let mut rate = Complex64::new(comm.im, -comm.re);
                if self.gamma != 0.0 {
                    rate += self.gamma
                        * match &eigen {
                            Some(d) => d[(i, j)],
                            None => -2.0 * self.hamming[i ^ j] as f64 * rho[(i, j)],
                        };
                }
                let k = self.pk.idx(i, j);
                dv[2 * k] = rate.re;
                dv[2 * k + 1] = if i == j { 0.0 } else { rate.im };
            }
        }
    }
}

/// Master-equation evolution from the ground-state projector at the start
/// of `schedule`.
pub fn evolve_lindblad(
    chain: &ChainInstance,
    schedule: &AnnealSchedule,
    gamma: f64,
    mode: DephasingMode,
    opts: &OracleOptions,
) -> Result<OracleRun> {
    let l = chain.len();
    check_cap(l, opts.max_mixed)?;
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(Error::InvalidArgument(format!("dephasing rate must be >= 0, got {gamma}")));
    }
    let psi0 = ground_state(chain, schedule.evaluate(0.0)?)?;
    let psi0 = psi0.map(|a| Complex64::new(a, 0.0));
    let dim = 1usize << l;
    let pk = HermitianPacking { n: dim };
    let mut v = pk.pack(&(&psi0 * psi0.adjoint()));
    let duration = schedule.duration();
    let mut sys = Lindblad {
        inner: Schrodinger::new(chain, schedule),
        gamma,
        mode,
        pk,
        rho: DMatrix::zeros(dim, dim),
        hamming: (0..dim).map(|k| k.count_ones()).collect(),
    };
    let layout = Layout::new(chain);
    let mut trajectory = Vec::new();
    let stats = integrate(
        &mut sys,
        0.0,
        &mut v,
        duration,
        &sample_times(duration, opts.n_samples),
        &opts.integrator(),
        |t, s| {
            let pops = (0..dim).map(|i| (i, s[2 * pk.idx(i, i)]));
            trajectory.push((t, kinks_from_populations(&layout, pops)));
            true
        },
    )?;
    let mut rho = DMatrix::zeros(dim, dim);
    pk.unpack_into(&v, &mut rho);
    let state = DenseState::Mixed { t: duration, l, rho };
    let mut flags = Vec::new();
    let defect = state.norm_defect();
    if defect > 1e-10_f64.max(10.0 * opts.rtol) {
        flags.push(OracleFlag::NormDrift { defect });
    }
    let min_ev = state.min_eigenvalue();
    if min_ev < -1e-6 {
        flags.push(OracleFlag::Positivity { min_eigenvalue: min_ev });
    }
    Ok(OracleRun { state, stats, trajectory, flags })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Topology;

    fn sorted_spectrum(h: DMatrix<f64>) -> Vec<f64> {
        sorted_eigen(h).0
    }

    #[test]
    fn two_site_limits() {
        let chain = ChainInstance::uniform(2, Topology::Open).unwrap();
        let ev = sorted_spectrum(dense_hamiltonian(&chain, 0.0, 1.0).unwrap());
        for (a, b) in ev.iter().zip([-1.0, -1.0, 1.0, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let ev = sorted_spectrum(dense_hamiltonian(&chain, 1.0, 0.0).unwrap());
        for (a, b) in ev.iter().zip([-2.0, 0.0, 0.0, 2.0]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn size_caps_are_enforced() {
        let chain = ChainInstance::uniform(13, Topology::Open).unwrap();
        assert!(matches!(dense_hamiltonian(&chain, 1.0, 1.0), Err(Error::SizeCap { .. })));
        let chain = ChainInstance::uniform(8, Topology::Open).unwrap();
        let sched = AnnealSchedule::kz_ramp(1.0, 1.0).unwrap();
        let r = evolve_lindblad(&chain, &sched, 0.1, DephasingMode::SiteDephasing, &OracleOptions::default());
        assert!(matches!(r, Err(Error::SizeCap { l: 8, cap: 7 })));
    }

    #[test]
    fn kink_expectation_of_simple_states() {
        let ring = ChainInstance::uniform(4, Topology::Periodic).unwrap();
        let all_up = DenseState::product_state(&[true; 4]);
        assert_eq!(kink_expectation(&all_up, &ring), 0.0);
        let neel = DenseState::product_state(&[true, false, true, false]);
        assert_eq!(kink_expectation(&neel, &ring), 4.0);
        assert!((kink_expectation(&DenseState::maximally_mixed(4), &ring) - 2.0).abs() < 1e-14);
    }

    #[test]
    fn first_distinct_gap_of_classical_chain() {
        let chain = ChainInstance::uniform(3, Topology::Open).unwrap();
        assert!((exact_gap(&chain, 0.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn excitation_probability_of_ground_space() {
        let ring = ChainInstance::uniform(4, Topology::Periodic).unwrap();
        let up = DenseState::product_state(&[true; 4]).density_matrix();
        let down = DenseState::product_state(&[false; 4]).density_matrix();
        let mix = DenseState::Mixed { t: 0.0, l: 4, rho: (up + down) * Complex64::new(0.5, 0.0) };
        assert!(excitation_probability(&mix, &ring, 0.0, 1.0).unwrap() < 1e-12);
        let kink = DenseState::product_state(&[true, true, false, false]);
        assert!((excitation_probability(&kink, &ring, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fermion_operators_anticommute() {
        let l = 3;
        let dim = 1 << l;
        let zero = Complex64::new(0.0, 0.0);
        let v: Vec<Complex64> = (0..dim).map(|k| Complex64::new(k as f64 * 0.3 - 1.0, 0.1 * k as f64)).collect();
        for p in 0..l {
            for q in 0..l {
                // {c_p, c_q^dag} v = delta_pq v
                let (mut a, mut b, mut c, mut d) = (vec![zero; dim], vec![zero; dim], vec![zero; dim], vec![zero; dim]);
                apply_fermion(l, q, true, &v, &mut a);
                apply_fermion(l, p, false, &a, &mut b);
                apply_fermion(l, p, false, &v, &mut c);
                apply_fermion(l, q, true, &c, &mut d);
                for k in 0..dim {
                    let expect = if p == q { v[k] } else { zero };
                    assert!((b[k] + d[k] - expect).norm() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn site_dephasing_preserves_trace_and_hermiticity() {
        let ring = ChainInstance::uniform(3, Topology::Periodic).unwrap();
        let sched = AnnealSchedule::kz_ramp(1.0, 2.0).unwrap();
        let run = evolve_lindblad(&ring, &sched, 0.3, DephasingMode::SiteDephasing, &OracleOptions::default())
            .unwrap();
        assert!(run.state.norm_defect() < 1e-10);
        assert!(run.state.min_eigenvalue() > -1e-8);
        assert!(run.flags.is_empty());
    }

    #[test]
    fn closed_lindblad_matches_pure() {
        let chain = ChainInstance::uniform(4, Topology::Periodic).unwrap();
        let sched = AnnealSchedule::kz_ramp(1.0, 1.5).unwrap();
        let opts = OracleOptions::with_tolerances(1e-11, 1e-13);
        let pure = evolve_pure(&chain, &sched, &opts).unwrap();
        let mixed = evolve_lindblad(&chain, &sched, 0.0, DephasingMode::SiteDephasing, &opts).unwrap();
        let diff = pure.state.density_matrix() - mixed.state.density_matrix();
        let trace_distance = 0.5 * diff.symmetric_eigenvalues().iter().map(|v| v.abs()).sum::<f64>();
        assert!(trace_distance < 1e-8, "{trace_distance}");
    }
}
