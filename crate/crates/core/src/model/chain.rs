use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Topology {
    Open,
    Periodic,
}

impl Topology {
    pub fn n_bonds(self, l: usize) -> usize {
        match self {
            Topology::Open => l - 1,
            Topology::Periodic => l,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Topology::Open => "open",
            Topology::Periodic => "periodic",
        }
    }
}

impl std::fmt::Display for Topology {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "open" => Ok(Topology::Open),
            "periodic" => Ok(Topology::Periodic),
            other => Err(Error::InvalidArgument(format!("unknown topology '{other}'"))),
        }
    }
}

/// Quenched-disorder request: fields uniform in `[x - delta_g, x + delta_g]`,
/// couplings uniform in `[1 - delta_j, 1 + delta_j]`, both in units of the base values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderSpec {
    pub x: f64,
    pub delta_j: f64,
    pub delta_g: f64,
    pub seed: u64,
    /// Reject parameters for which a coupling could reach zero or change sign.
    pub sign_definite: bool,
}

impl DisorderSpec {
    pub fn uniform(x: f64, delta: f64, seed: u64) -> Self {
        DisorderSpec { x, delta_j: delta, delta_g: delta, seed, sign_definite: true }
    }
}

/// Provenance of a disordered chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisorderMeta {
    pub x: f64,
    pub delta_j: f64,
    pub delta_g: f64,
    pub seed: u64,
}

/// Coefficient profile of a transverse-field Ising chain.
///
/// `j` and `g` are dimensionless profiles: the couplings at time `t` are
/// `J(t) * j[n]` and `g(t) * g[n]` where `(g(t), J(t))` come from an
/// [`AnnealSchedule`](super::AnnealSchedule). Antiferromagnetic chains store
/// the magnitude of the coupling and set `ferro_sign = -1`; on a bipartite
/// chain the two are related by flipping every other spin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainInstance {
    l: usize,
    topology: Topology,
    j: Vec<f64>,
    g: Vec<f64>,
    ferro_sign: i8,
    disorder: Option<DisorderMeta>,
}

impl ChainInstance {
    /// Uniform chain with unit profiles.
    pub fn uniform(l: usize, topology: Topology) -> Result<Self> {
        build_chain(l, topology, 1.0, 1.0, None)
    }

    /// Chain from explicit profiles; lengths must match the topology.
    pub fn from_profiles(topology: Topology, j: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let l = g.len();
        if l < 2 {
            return Err(Error::InvalidChain(format!("need at least 2 sites, got {l}")));
        }
        if j.len() != topology.n_bonds(l) {
            return Err(Error::InvalidChain(format!(
                "{topology} chain with {l} sites needs {} bonds, got {}",
                topology.n_bonds(l),
                j.len()
            )));
        }
        if j.iter().chain(g.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidChain("non-finite coefficient".into()));
        }
        Ok(ChainInstance { l, topology, j, g, ferro_sign: 1, disorder: None })
    }

    pub fn len(&self) -> usize {
        self.l
    }

    pub fn is_empty(&self) -> bool {
        self.l == 0
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn n_bonds(&self) -> usize {
        self.j.len()
    }

    /// Bond profile; bond `n` joins sites `n` and `(n + 1) mod L`.
    pub fn couplings(&self) -> &[f64] {
        &self.j
    }

    pub fn fields(&self) -> &[f64] {
        &self.g
    }

    pub fn ferro_sign(&self) -> i8 {
        self.ferro_sign
    }

    pub fn disorder(&self) -> Option<&DisorderMeta> {
        self.disorder.as_ref()
    }

    pub fn is_uniform(&self) -> bool {
        let j0 = self.j[0];
        let g0 = self.g[0];
        self.j.iter().all(|&v| v == j0) && self.g.iter().all(|&v| v == g0)
    }

    /// Bond endpoints `(n, m)` as zero-based site indices.
    pub fn bonds(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let l = self.l;
        (0..self.j.len()).map(move |n| (n, (n + 1) % l))
    }
}

/// Build a chain with optional uniform quenched disorder.
///
/// A negative `base_j` builds the antiferromagnetic chain: profiles hold
/// `|base_j|` and the sign is kept in `ferro_sign`.
pub fn build_chain(
    l: usize,
    topology: Topology,
    base_j: f64,
    base_g: f64,
    disorder: Option<&DisorderSpec>,
) -> Result<ChainInstance> {
    if l < 2 {
        return Err(Error::InvalidChain(format!("need at least 2 sites, got {l}")));
    }
    if !base_j.is_finite() || !base_g.is_finite() {
        return Err(Error::InvalidChain("non-finite base coupling".into()));
    }
    let ferro_sign = if base_j < 0.0 { -1 } else { 1 };
    let j_mag = base_j.abs();
    let n_bonds = topology.n_bonds(l);

    let Some(spec) = disorder else {
        return Ok(ChainInstance {
            l,
            topology,
            j: vec![j_mag; n_bonds],
            g: vec![base_g; l],
            ferro_sign,
            disorder: None,
        });
    };

    if !(spec.delta_j >= 0.0 && spec.delta_g >= 0.0) {
        return Err(Error::InvalidChain(format!(
            "disorder widths must be non-negative (delta_J = {}, delta_g = {})",
            spec.delta_j, spec.delta_g
        )));
    }
    if spec.sign_definite && spec.delta_j >= 1.0 {
        return Err(Error::InvalidChain(format!(
            "delta_J = {} lets a coupling reach zero; sign-definite couplings were requested",
            spec.delta_j
        )));
    }

    // Separate streams keep the J and g draws independent of each other's length.
    let mut rng_j = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_j.set_stream(0);
    let mut rng_g = ChaCha8Rng::seed_from_u64(spec.seed);
    rng_g.set_stream(1);

    let j = (0..n_bonds)
        .map(|_| j_mag * sample_uniform(&mut rng_j, 1.0, spec.delta_j))
        .collect();
    let g = (0..l)
        .map(|_| base_g * sample_uniform(&mut rng_g, spec.x, spec.delta_g))
        .collect();

    Ok(ChainInstance {
        l,
        topology,
        j,
        g,
        ferro_sign,
        disorder: Some(DisorderMeta {
            x: spec.x,
            delta_j: spec.delta_j,
            delta_g: spec.delta_g,
            seed: spec.seed,
        }),
    })
}

fn sample_uniform(rng: &mut ChaCha8Rng, center: f64, half_width: f64) -> f64 {
    if half_width == 0.0 {
        center
    } else {
        rng.random_range(center - half_width..=center + half_width)
    }
}

/// Deterministic per-task seed derived from a base seed, for parallel sweeps.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(index.wrapping_add(2));
    rng.random()
}
