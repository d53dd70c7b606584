//! Run records, aggregation, scaling fits and crossover detection.

mod aggregate;
mod crossover;
mod fit;
mod records;

pub use aggregate::{aggregate, mean_sem, write_aggregate, AggregateOptions, AggregateRow, GroupField};
pub use crossover::{
    crossover_detect, Crossover, CrossoverOptions, RightBehavior, MIN_CROSSOVER_DECADES, MIN_CROSSOVER_POINTS,
};
pub use fit::{
    fit_exponential, fit_power_law, write_fit, ExponentialFit, FitPoint, FitWindow, PowerLawFit, Weighting,
};
pub use records::{
    energy_to_kinks, ingest, kinks_to_energy, write_records, write_row_errors, Engine, EnergyUnit, IngestReport,
    RowError, RunRecord, TimeUnit, GROUND_ENERGY_SLACK, RECORD_COLUMNS,
};
