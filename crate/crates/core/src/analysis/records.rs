use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Topology;

/// Relative slack below the classical ground energy still accepted as
/// round-off rather than a calibration error.
pub const GROUND_ENERGY_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Engine {
    Correlator,
    Oracle,
    External,
}

impl Engine {
    pub fn as_str(self) -> &'static str {
        match self {
            Engine::Correlator => "correlator",
            Engine::Oracle => "oracle",
            Engine::External => "external",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TimeUnit {
    #[serde(rename = "hbar_over_J")]
    HbarOverJ,
    #[serde(rename = "us")]
    Microseconds,
}

impl TimeUnit {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeUnit::HbarOverJ => "hbar_over_J",
            TimeUnit::Microseconds => "us",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EnergyUnit {
    J,
    #[serde(rename = "GHz")]
    Ghz,
}

/// One anneal outcome. `J_max` and `final_energy` share `energy_unit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub chain_id: String,
    pub engine: Engine,
    #[serde(rename = "L")]
    pub l: usize,
    pub topology: Topology,
    pub n_couplings: usize,
    #[serde(rename = "J_max")]
    pub j_max: f64,
    #[serde(rename = "tau_Q")]
    pub tau_q: f64,
    #[serde(rename = "tau_Q_unit")]
    pub tau_q_unit: TimeUnit,
    pub final_energy: f64,
    pub energy_unit: EnergyUnit,
    pub gamma: f64,
    pub seed: u64,
    pub realization_id: String,
}

pub const RECORD_COLUMNS: [&str; 13] = [
    "chain_id",
    "engine",
    "L",
    "topology",
    "n_couplings",
    "J_max",
    "tau_Q",
    "tau_Q_unit",
    "final_energy",
    "energy_unit",
    "gamma",
    "seed",
    "realization_id",
];

impl RunRecord {
    pub fn validate(&self) -> Result<()> {
        if self.l < 2 {
            return Err(Error::Validation(format!("L = {} is below 2", self.l)));
        }
        if self.n_couplings != self.topology.n_bonds(self.l) {
            return Err(Error::Validation(format!(
                "n_couplings = {} does not match a {} chain of L = {}",
                self.n_couplings, self.topology, self.l
            )));
        }
        if !(self.tau_q > 0.0 && self.tau_q.is_finite()) {
            return Err(Error::Validation(format!("tau_Q = {} must be positive", self.tau_q)));
        }
        if !(self.j_max != 0.0 && self.j_max.is_finite()) {
            return Err(Error::Validation("J_max must be finite and nonzero".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Validation(format!("gamma = {} must be >= 0", self.gamma)));
        }
        self.kinks().map(|_| ())
    }

    pub fn kinks(&self) -> Result<f64> {
        energy_to_kinks(self.final_energy, self.n_couplings, self.j_max)
    }
}

/// Kinks from a classical readout energy: `(N |J| + E) / (2 |J|)`.
pub fn energy_to_kinks(e: f64, n: usize, j_max: f64) -> Result<f64> {
    if j_max == 0.0 || !j_max.is_finite() || !e.is_finite() {
        return Err(Error::Validation(format!("cannot convert E = {e} with J_max = {j_max}")));
    }
    let ground = n as f64 * j_max.abs();
    if e < -ground * (1.0 + GROUND_ENERGY_SLACK) {
        return Err(Error::Validation(format!(
            "energy {e} lies below the classical ground energy {}",
            -ground
        )));
    }
    Ok((ground + e) / (2.0 * j_max.abs()))
}

/// Inverse of [`energy_to_kinks`].
pub fn kinks_to_energy(kinks: f64, n: usize, j_max: f64) -> f64 {
    2.0 * j_max.abs() * kinks - n as f64 * j_max.abs()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowError {
    /// One-based line number in the input, header included.
    pub line: u64,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct IngestReport {
    pub records: Vec<RunRecord>,
    pub errors: Vec<RowError>,
}

/// Parse and validate run records. Structural problems with the header are
/// errors; bad rows are collected with their line numbers.
pub fn ingest<R: Read>(reader: R) -> Result<IngestReport> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(e) => return Err(Error::Validation(format!("unreadable header: {e}"))),
    };
    if headers.is_empty() {
        return Ok(IngestReport::default());
    }
    let missing: Vec<&str> =
        RECORD_COLUMNS.iter().copied().filter(|c| !headers.iter().any(|h| h == *c)).collect();
    if !missing.is_empty() {
        return Err(Error::Validation(format!("missing required columns: {}", missing.join(", "))));
    }
    let mut report = IngestReport::default();
    for row in rdr.records() {
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                report.errors.push(RowError { line, message: e.to_string() });
                continue;
            }
        };
        let line = row.position().map_or(0, |p| p.line());
        let unit_col = headers.iter().position(|h| h == "tau_Q_unit").unwrap();
        if row.get(unit_col).is_none_or(str::is_empty) {
            report.errors.push(RowError { line, message: "tau_Q_unit is missing".into() });
            continue;
        }
        match row.deserialize::<RunRecord>(Some(&headers)) {
            Ok(rec) => match rec.validate() {
                Ok(()) => report.records.push(rec),
                Err(e) => report.errors.push(RowError { line, message: e.to_string() }),
            },
            Err(e) => report.errors.push(RowError { line, message: e.to_string() }),
        }
    }
    Ok(report)
}

pub fn write_records<W: Write>(records: &[RunRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(RECORD_COLUMNS)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_row_errors<W: Write>(errors: &[RowError], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["line", "message"])?;
    for e in errors {
        w.write_record([e.line.to_string(), e.message.clone()])?;
    }
    w.flush()?;
    Ok(())
}
