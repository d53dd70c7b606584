//! Chains, disorder, annealing schedules and units.

mod chain;
mod schedule;
mod units;

pub use chain::{build_chain, derive_seed, ChainInstance, DisorderMeta, DisorderSpec, Topology};
pub use schedule::{AnnealSchedule, Couplings, MonotoneCubic, ScheduleKind, ScheduleTable};
pub use units::UnitSystem;

/// Per-site fields and per-bond couplings of `chain` at the scales `c`.
pub fn site_coefficients(chain: &ChainInstance, c: Couplings) -> (Vec<f64>, Vec<f64>) {
    let g = chain.fields().iter().map(|&v| v * c.g).collect();
    let j = chain.couplings().iter().map(|&v| v * c.j).collect();
    (g, j)
}
