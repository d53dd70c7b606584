use std::path::Path;

use serde::{Deserialize, Serialize};
use taclab::analysis::{AggregateOptions, FitWindow, GroupField};
use taclab::model::{AnnealSchedule, ScheduleTable, Topology};
use taclab::oracle::DephasingMode;
use taclab::theory::{log_grid, RegimeThresholds};
use taclab::validation::{EngineRule, ScheduleTemplate, SweepPlan, VerdictConfig};

use crate::failure::Failure;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub schema_version: u32,
    pub chain: ChainSection,
    pub schedule: ScheduleSection,
    pub engine: EngineSection,
    pub sweep: SweepSection,
    pub gaps: GapsSection,
    pub analysis: AnalysisSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainSection {
    #[serde(rename = "L")]
    pub l: usize,
    pub topology: Topology,
    #[serde(rename = "J")]
    pub j: f64,
    pub disorder: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleName {
    LinearRampG,
    KzRamp,
    Smooth,
    Tabulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    pub kind: ScheduleName,
    #[serde(rename = "tau_Q")]
    pub tau_q: f64,
    pub g_max: f64,
    pub g_min: f64,
    pub n_points: usize,
    pub table: String,
    #[serde(rename = "J_max")]
    pub j_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EngineSection {
    pub kind: EngineRule,
    pub gamma: f64,
    pub dephasing: DephasingMode,
    pub rtol: f64,
    pub atol: f64,
    pub max_pure: usize,
    pub max_mixed: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    #[serde(rename = "L")]
    pub lengths: Vec<usize>,
    #[serde(rename = "tau_Q")]
    pub tau_q: Vec<f64>,
    #[serde(rename = "tau_Q_min")]
    pub tau_q_min: f64,
    #[serde(rename = "tau_Q_max")]
    pub tau_q_max: f64,
    #[serde(rename = "tau_Q_points")]
    pub tau_q_points: usize,
    pub gamma: Vec<f64>,
    pub disorder: Vec<f64>,
    pub seeds_per_point: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GapsSection {
    #[serde(rename = "L")]
    pub lengths: Vec<usize>,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub group: Vec<GroupField>,
    pub collapse_reads: bool,
    pub min_kinks: f64,
    pub min_runs: usize,
    pub kzm_band: [f64; 2],
    pub adiabatic_ratio: f64,
    #[serde(rename = "J_c")]
    pub j_c: f64,
    pub k_lo: f64,
    pub k_hi: f64,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            schema_version: SCHEMA_VERSION,
            chain: ChainSection::default(),
            schedule: ScheduleSection::default(),
            engine: EngineSection::default(),
            sweep: SweepSection::default(),
            gaps: GapsSection::default(),
            analysis: AnalysisSection::default(),
        }
    }
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection { l: 100, topology: Topology::Open, j: 1.0, disorder: 0.0, seed: 0 }
    }
}

impl Default for ScheduleSection {
    fn default() -> Self {
        ScheduleSection {
            kind: ScheduleName::KzRamp,
            tau_q: 10.0,
            g_max: 2.0,
            g_min: 0.0,
            n_points: 257,
            table: String::new(),
            j_max: 1.0,
        }
    }
}

impl Default for EngineSection {
    fn default() -> Self {
        EngineSection {
            kind: EngineRule::Auto,
            gamma: 0.0,
            dephasing: DephasingMode::SiteDephasing,
            rtol: 1e-9,
            atol: 1e-11,
            max_pure: taclab::oracle::DEFAULT_MAX_PURE,
            max_mixed: taclab::oracle::DEFAULT_MAX_MIXED,
            n_samples: 64,
        }
    }
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            lengths: vec![16, 32],
            tau_q: Vec::new(),
            tau_q_min: 1.0,
            tau_q_max: 100.0,
            tau_q_points: 9,
            gamma: vec![0.0],
            disorder: vec![0.0],
            seeds_per_point: 1,
        }
    }
}

impl Default for GapsSection {
    fn default() -> Self {
        GapsSection { lengths: Vec::new(), n_samples: 401 }
    }
}

impl Default for AnalysisSection {
    fn default() -> Self {
        let v = VerdictConfig::default();
        AnalysisSection {
            group: Vec::new(),
            collapse_reads: true,
            min_kinks: v.window.min_kinks,
            min_runs: v.window.min_runs,
            kzm_band: [v.kzm_band.0, v.kzm_band.1],
            adiabatic_ratio: v.adiabatic_ratio,
            j_c: v.j_c,
            k_lo: v.thresholds.k_lo,
            k_hi: v.thresholds.k_hi,
        }
    }
}

/// Every configuration key with its unit or type, shown by `--help`.
pub const KEYS: &[(&str, &str)] = &[
    ("schema_version", "integer, must be 1"),
    ("chain.L", "sites"),
    ("chain.topology", "open | periodic"),
    ("chain.J", "coupling scale, energy unit J (sets hbar/J time unit)"),
    ("chain.disorder", "relative half-width of uniform J and g disorder, [0, 1)"),
    ("chain.seed", "integer base seed"),
    ("schedule.kind", "linear_ramp_g | kz_ramp | smooth | tabulated"),
    ("schedule.tau_Q", "quench time, hbar/J"),
    ("schedule.g_max", "kz_ramp start field, units of J"),
    ("schedule.g_min", "kz_ramp end field, units of J"),
    ("schedule.n_points", "table points for the smooth schedule"),
    ("schedule.table", "path to an s,g,j CSV for the tabulated schedule"),
    ("schedule.J_max", "coupling scale applied to the table column j, energy unit J"),
    ("engine.kind", "auto | correlator | oracle"),
    ("engine.gamma", "dephasing rate, J/hbar"),
    ("engine.dephasing", "site_dephasing | eigenbasis_dephasing (oracle only)"),
    ("engine.rtol", "relative integrator tolerance"),
    ("engine.atol", "absolute integrator tolerance"),
    ("engine.max_pure", "largest L for dense pure-state evolution, sites"),
    ("engine.max_mixed", "largest L for dense density-matrix evolution, sites"),
    ("engine.n_samples", "trajectory samples written by quench"),
    ("sweep.L", "list of chain lengths, sites"),
    ("sweep.tau_Q", "explicit list of quench times, hbar/J (overrides the log grid)"),
    ("sweep.tau_Q_min", "log grid start, hbar/J"),
    ("sweep.tau_Q_max", "log grid end, hbar/J"),
    ("sweep.tau_Q_points", "log grid size"),
    ("sweep.gamma", "list of dephasing rates, J/hbar"),
    ("sweep.disorder", "list of disorder half-widths, [0, 1)"),
    ("sweep.seeds_per_point", "disorder realizations per grid point"),
    ("gaps.L", "chain lengths for the gap-vs-L table, sites"),
    ("gaps.n_samples", "grid points along the schedule before refinement"),
    ("analysis.group", "extra grouping keys: gamma | topology | engine | chain_id"),
    ("analysis.collapse_reads", "average reads per chain realization before the SEM"),
    ("analysis.min_kinks", "fit window floor, kinks"),
    ("analysis.min_runs", "fit window minimum runs for external data"),
    ("analysis.kzm_band", "[lo, hi] exponent band labelled KZM-limited"),
    ("analysis.adiabatic_ratio", "power-law over exponential residual ratio for adiabatic"),
    ("analysis.J_c", "critical coupling for theory overlays, energy unit J"),
    ("analysis.k_lo", "kinks below which the regime is LZ"),
    ("analysis.k_hi", "kinks above which the regime is KZM"),
];

pub fn keys_help() -> String {
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut s = String::from("Configuration keys (TOML file or --set key=value):\n");
    for (k, d) in KEYS {
        s.push_str(&format!("  {k:<width$}  {d}\n"));
    }
    s.push_str(
        "\nExit codes: 0 ok, 1 io, 2 config, 3 numerical, 4 validation, 130 interrupted.\n\
         Environment: TACLAB_WORKERS sets the default worker count.",
    );
    s
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), Failure> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Failure::config(format!("override `{assignment}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Failure::config(format!("malformed key `{key}`")));
    }
    let mut node = table;
    for part in &parts[..parts.len() - 1] {
        let entry = node.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Failure::config(format!("`{part}` in `{key}` is not a section")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl Config {
    /// Load an optional file, apply `key=value` overrides in order and
    /// check the result.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Config, Failure> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Failure::io(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>().map_err(|e| Failure::config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: Config =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Failure::config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), Failure> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Failure::config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if !(self.chain.j > 0.0) {
            return Err(Failure::config("chain.J must be positive"));
        }
        if self.schedule.kind == ScheduleName::Tabulated && self.schedule.table.is_empty() {
            return Err(Failure::config("schedule.table is required for the tabulated schedule"));
        }
        if !(self.analysis.kzm_band[0] <= self.analysis.kzm_band[1]) {
            return Err(Failure::config("analysis.kzm_band must be [lo, hi] with lo <= hi"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn template(&self) -> Result<ScheduleTemplate, Failure> {
        let s = &self.schedule;
        Ok(match s.kind {
            ScheduleName::LinearRampG => ScheduleTemplate::LinearRampG,
            ScheduleName::KzRamp => ScheduleTemplate::KzRamp { g_max_ratio: s.g_max, g_min_ratio: s.g_min },
            ScheduleName::Smooth => ScheduleTemplate::Smooth { n_points: s.n_points },
            ScheduleName::Tabulated => {
                let table = ScheduleTable::from_path(Path::new(&s.table))?;
                ScheduleTemplate::Tabulated { table, j_max: s.j_max }
            }
        })
    }

    pub fn schedule(&self) -> Result<AnnealSchedule, Failure> {
        Ok(self.template()?.build(self.chain.j, self.schedule.tau_q)?)
    }

    fn plan_base(&self) -> Result<SweepPlan, Failure> {
        let e = &self.engine;
        Ok(SweepPlan {
            lengths: vec![self.chain.l],
            tau_qs: vec![self.schedule.tau_q],
            gammas: vec![e.gamma],
            deltas: vec![self.chain.disorder],
            seeds_per_point: 1,
            base_seed: self.chain.seed,
            topology: self.chain.topology,
            j: self.chain.j,
            schedule: self.template()?,
            engine: e.kind,
            dephasing: e.dephasing,
            rtol: e.rtol,
            atol: e.atol,
            max_pure: e.max_pure,
            max_mixed: e.max_mixed,
        })
    }

    /// The one-point plan behind `quench`.
    pub fn quench_plan(&self) -> Result<SweepPlan, Failure> {
        self.plan_base()
    }

    pub fn sweep_plan(&self) -> Result<SweepPlan, Failure> {
        let s = &self.sweep;
        let tau_qs = if s.tau_q.is_empty() {
            if !(s.tau_q_min > 0.0 && s.tau_q_max >= s.tau_q_min) || s.tau_q_points == 0 {
                return Err(Failure::config("sweep.tau_Q_min/max/points do not define a grid"));
            }
            log_grid(s.tau_q_min, s.tau_q_max, s.tau_q_points)
        } else {
            s.tau_q.clone()
        };
        Ok(SweepPlan {
            lengths: s.lengths.clone(),
            tau_qs,
            gammas: s.gamma.clone(),
            deltas: s.disorder.clone(),
            seeds_per_point: s.seeds_per_point,
            ..self.plan_base()?
        })
    }

    pub fn aggregate_options(&self) -> AggregateOptions {
        AggregateOptions { extra_keys: self.analysis.group.clone(), collapse_reads: self.analysis.collapse_reads }
    }

    pub fn verdict_config(&self) -> VerdictConfig {
        let a = &self.analysis;
        VerdictConfig {
            kzm_band: (a.kzm_band[0], a.kzm_band[1]),
            adiabatic_ratio: a.adiabatic_ratio,
            window: FitWindow { min_kinks: a.min_kinks, min_runs: a.min_runs },
            thresholds: RegimeThresholds { k_lo: a.k_lo, k_hi: a.k_hi },
            j_c: a.j_c,
            ..VerdictConfig::default()
        }
    }
}
