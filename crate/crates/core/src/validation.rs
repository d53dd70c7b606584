//! Simulator sweeps and the adiabaticity verdict built on top of them.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::{
    aggregate, crossover_detect, fit_power_law, kinks_to_energy, AggregateOptions, AggregateRow, Crossover,
    CrossoverOptions, Engine, EnergyUnit, FitPoint, FitWindow, GroupField, PowerLawFit, RightBehavior, RunRecord,
    TimeUnit, Weighting, MIN_CROSSOVER_DECADES, MIN_CROSSOVER_POINTS,
};
use crate::correlator::{evolve_with, EvolveOptions};
use crate::error::{Error, ErrorCategory, Result};
use crate::integrator::IntegrationError;
use crate::model::{build_chain, derive_seed, AnnealSchedule, DisorderSpec, ScheduleTable, Topology};
use crate::oracle::{
    evolve_lindblad, evolve_pure, kink_expectation, DephasingMode, OracleOptions, DEFAULT_MAX_MIXED,
    DEFAULT_MAX_PURE,
};
use crate::theory::{predict, RegimeThresholds, TheoryPrediction};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ScheduleTemplate {
    LinearRampG,
    KzRamp { g_max_ratio: f64, g_min_ratio: f64 },
    Smooth { n_points: usize },
    Tabulated { table: ScheduleTable, j_max: f64 },
}

impl ScheduleTemplate {
    pub fn build(&self, j: f64, tau_q: f64) -> Result<AnnealSchedule> {
        match self {
            ScheduleTemplate::LinearRampG => AnnealSchedule::linear_ramp_g(j, tau_q),
            ScheduleTemplate::KzRamp { g_max_ratio, g_min_ratio } => {
                AnnealSchedule::kz_ramp_window(j, tau_q, *g_max_ratio, *g_min_ratio)
            }
            ScheduleTemplate::Smooth { n_points } => AnnealSchedule::smooth_crossing(j, tau_q, *n_points),
            ScheduleTemplate::Tabulated { table, j_max } => AnnealSchedule::tabulated(table.clone(), *j_max, tau_q),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EngineRule {
    /// Correlator engine for open chains longer than the mixed-state cap,
    /// dense oracle otherwise.
    #[default]
    Auto,
    Correlator,
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub lengths: Vec<usize>,
    pub tau_qs: Vec<f64>,
    pub gammas: Vec<f64>,
    /// Coupling and field disorder half-widths; 0 gives the clean chain.
    pub deltas: Vec<f64>,
    pub seeds_per_point: usize,
    pub base_seed: u64,
    pub topology: Topology,
    pub j: f64,
    pub schedule: ScheduleTemplate,
    pub engine: EngineRule,
    pub dephasing: DephasingMode,
    pub rtol: f64,
    pub atol: f64,
    pub max_pure: usize,
    pub max_mixed: usize,
}

impl Default for SweepPlan {
    fn default() -> Self {
        SweepPlan {
            lengths: vec![8],
            tau_qs: vec![1.0],
            gammas: vec![0.0],
            deltas: vec![0.0],
            seeds_per_point: 1,
            base_seed: 0,
            topology: Topology::Open,
            j: 1.0,
            schedule: ScheduleTemplate::KzRamp { g_max_ratio: 2.0, g_min_ratio: 0.0 },
            engine: EngineRule::Auto,
            dephasing: DephasingMode::SiteDephasing,
            rtol: 1e-9,
            atol: 1e-11,
            max_pure: DEFAULT_MAX_PURE,
            max_mixed: DEFAULT_MAX_MIXED,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub l: usize,
    pub tau_q: f64,
    pub gamma: f64,
    pub delta: f64,
    pub replica: usize,
    /// Disorder seed, shared by every tau and gamma of the same realization.
    pub seed: u64,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("lengths", self.lengths.is_empty()),
            ("tau_qs", self.tau_qs.is_empty()),
            ("gammas", self.gammas.is_empty()),
            ("deltas", self.deltas.is_empty()),
            ("seeds_per_point", self.seeds_per_point == 0),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::InvalidArgument(format!("sweep grid `{name}` is empty")));
        }
        if let Some(l) = self.lengths.iter().find(|&&l| l < 2) {
            return Err(Error::InvalidArgument(format!("chain length {l} is below 2")));
        }
        if let Some(t) = self.tau_qs.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidArgument(format!("tau_Q = {t} must be positive")));
        }
        if let Some(g) = self.gammas.iter().find(|g| !(**g >= 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument(format!("gamma = {g} must be >= 0")));
        }
        if let Some(d) = self.deltas.iter().find(|d| !(**d >= 0.0 && **d < 1.0)) {
            return Err(Error::InvalidArgument(format!("disorder width {d} must lie in [0, 1)")));
        }
        if !(self.j > 0.0 && self.j.is_finite()) {
            return Err(Error::InvalidArgument(format!("J = {} must be positive", self.j)));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::InvalidArgument("tolerances must be positive".into()));
        }
        self.schedule.build(self.j, self.tau_qs[0]).map(|_| ())
    }

    /// Every point in a fixed order. Seeds depend only on the base seed,
    /// length, disorder width and replica index.
    pub fn points(&self) -> Vec<SweepPoint> {
        let mut out = Vec::new();
        for (il, &l) in self.lengths.iter().enumerate() {
            for (id, &delta) in self.deltas.iter().enumerate() {
                for replica in 0..self.seeds_per_point {
                    let index = ((il * self.deltas.len() + id) * self.seeds_per_point + replica) as u64;
                    let seed = derive_seed(self.base_seed, index);
                    for &tau_q in &self.tau_qs {
                        for &gamma in &self.gammas {
                            out.push(SweepPoint { l, tau_q, gamma, delta, replica, seed });
                        }
                    }
                }
            }
        }
        out
    }

    pub fn route(&self, l: usize) -> Engine {
        match (self.topology, self.engine) {
            (Topology::Periodic, _) | (_, EngineRule::Oracle) => Engine::Oracle,
            (Topology::Open, EngineRule::Correlator) => Engine::Correlator,
            (Topology::Open, EngineRule::Auto) if l > self.max_mixed => Engine::Correlator,
            (Topology::Open, EngineRule::Auto) => Engine::Oracle,
        }
    }

    pub fn run_point(&self, p: &SweepPoint, cancel: Option<Arc<AtomicBool>>) -> Result<RunRecord> {
        self.run_point_detailed(p, 0, cancel).map(|r| r.record)
    }

    /// Run one point, also sampling the kink trajectory at `n_samples`
    /// evenly spaced times and collecting engine health warnings.
    pub fn run_point_detailed(
        &self,
        p: &SweepPoint,
        n_samples: usize,
        cancel: Option<Arc<AtomicBool>>,
    ) -> Result<PointRun> {
        let disorder = (p.delta > 0.0).then(|| DisorderSpec::uniform(1.0, p.delta, p.seed));
        let chain = build_chain(p.l, self.topology, 1.0, 1.0, disorder.as_ref())?;
        let schedule = self.schedule.build(self.j, p.tau_q)?;
        let engine = self.route(p.l);
        let (kinks, trajectory, warnings) = match engine {
            Engine::Correlator => {
                let opts = EvolveOptions { rtol: self.rtol, atol: self.atol, n_samples, cancel };
                let r = evolve_with(&chain, &schedule, p.gamma, &opts)?;
                let warnings = r.flags.iter().map(|f| format!("{f:?}")).collect();
                (r.kinks, r.trajectory, warnings)
            }
            _ => {
                let opts = OracleOptions {
                    rtol: self.rtol,
                    atol: self.atol,
                    max_pure: self.max_pure,
                    max_mixed: self.max_mixed,
                    n_samples,
                    cancel,
                };
                let run = if p.gamma == 0.0 {
                    evolve_pure(&chain, &schedule, &opts)?
                } else {
                    evolve_lindblad(&chain, &schedule, p.gamma, self.dephasing, &opts)?
                };
                let warnings = run.flags.iter().map(|f| format!("{f:?}")).collect();
                (kink_expectation(&run.state, &chain), run.trajectory, warnings)
            }
        };
        let n = chain.n_bonds();
        let chain_id = if p.delta > 0.0 {
            format!("L{}-{}-d{}-r{}", p.l, self.topology, p.delta, p.replica)
        } else {
            format!("L{}-{}", p.l, self.topology)
        };
        let record = RunRecord {
            chain_id,
            engine,
            l: p.l,
            topology: self.topology,
            n_couplings: n,
            j_max: self.j,
            tau_q: p.tau_q,
            tau_q_unit: TimeUnit::HbarOverJ,
            // Kink-equivalent energy, so the standard conversion recovers the
            // kink count exactly even for disordered couplings.
            final_energy: kinks_to_energy(kinks, n, self.j),
            energy_unit: EnergyUnit::J,
            gamma: p.gamma,
            seed: p.seed,
            realization_id: format!("s{}", p.seed),
        };
        Ok(PointRun { record, trajectory, warnings })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointRun {
    pub record: RunRecord,
    /// `(t, kinks)` samples.
    pub trajectory: Vec<(f64, f64)>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointFailure {
    pub point: SweepPoint,
    pub category: ErrorCategory,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepOutcome {
    pub records: Vec<RunRecord>,
    pub failures: Vec<PointFailure>,
    /// Points skipped or aborted after cancellation was requested.
    pub cancelled: usize,
}

/// Sort key making emission independent of completion order.
fn record_order(a: &RunRecord, b: &RunRecord) -> std::cmp::Ordering {
    (a.l, a.topology, &a.chain_id, a.seed)
        .cmp(&(b.l, b.topology, &b.chain_id, b.seed))
        .then(a.tau_q.total_cmp(&b.tau_q))
        .then(a.gamma.total_cmp(&b.gamma))
}

/// Run every plan point on a pool of `workers` threads (all cores when
/// `None`). Individual failures are collected; the sweep keeps going.
pub fn run_sweep(plan: &SweepPlan, workers: Option<usize>, cancel: Option<Arc<AtomicBool>>) -> Result<SweepOutcome> {
    plan.validate()?;
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = workers {
        builder = builder.num_threads(n.max(1));
    }
    let pool = builder.build().map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
    let points = plan.points();
    let is_cancelled = || cancel.as_ref().is_some_and(|c| c.load(Ordering::Relaxed));
    let results: Vec<(SweepPoint, Option<Result<RunRecord>>)> = pool.install(|| {
        points
            .par_iter()
            .map(|p| {
                if is_cancelled() {
                    return (*p, None);
                }
                (*p, Some(plan.run_point(p, cancel.clone())))
            })
            .collect()
    });

    let mut out = SweepOutcome::default();
    for (point, res) in results {
        match res {
            None | Some(Err(Error::Integration(IntegrationError::Cancelled { .. }))) => out.cancelled += 1,
            Some(Ok(r)) => out.records.push(r),
            Some(Err(e)) => out.failures.push(PointFailure { point, category: e.category(), message: e.to_string() }),
        }
    }
    out.records.sort_by(record_order);
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "adiabatic")]
    Adiabatic,
    #[serde(rename = "KZM-limited")]
    KzmLimited,
    #[serde(rename = "anomalous")]
    Anomalous,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Adiabatic => "adiabatic",
            Verdict::KzmLimited => "KZM-limited",
            Verdict::Anomalous => "anomalous",
        }
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerdictConfig {
    pub kzm_band: (f64, f64),
    /// Power-law over exponential residual ratio on the tail required to
    /// call a series adiabatic.
    pub adiabatic_ratio: f64,
    pub window: FitWindow,
    pub crossover: CrossoverOptions,
    pub thresholds: RegimeThresholds,
    /// Critical coupling used for the theory overlay of `hbar_over_J` series.
    pub j_c: f64,
}

impl Default for VerdictConfig {
    fn default() -> Self {
        VerdictConfig {
            kzm_band: (0.4, 0.6),
            adiabatic_ratio: 2.0,
            window: FitWindow::default(),
            crossover: CrossoverOptions::default(),
            thresholds: RegimeThresholds::default(),
            j_c: 1.0,
        }
    }
}

/// The verdict rule, a pure function of the reported numbers.
pub fn decide(crossover: Option<&Crossover>, fit: Option<&PowerLawFit>, cfg: &VerdictConfig) -> Option<Verdict> {
    let c = crossover?;
    if c.right_behavior == RightBehavior::Exponential && c.rss_ratio >= cfg.adiabatic_ratio {
        return Some(Verdict::Adiabatic);
    }
    let f = fit?;
    if f.x >= cfg.kzm_band.0 && f.x <= cfg.kzm_band.1 {
        Some(Verdict::KzmLimited)
    } else {
        Some(Verdict::Anomalous)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesReport {
    pub l: usize,
    pub topology: Topology,
    pub gamma: f64,
    pub tau_q_unit: TimeUnit,
    pub points: Vec<AggregateRow>,
    /// Points that passed the fit window.
    pub n_fit_points: usize,
    pub fit: Option<PowerLawFit>,
    pub crossover: Option<Crossover>,
    pub verdict: Option<Verdict>,
    /// Why any of the above is missing.
    pub gaps: Vec<String>,
    pub overlay: Vec<TheoryPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub version: String,
}

impl Provenance {
    pub fn new(config_bytes: &[u8], mut seeds: Vec<u64>) -> Self {
        seeds.sort_unstable();
        seeds.dedup();
        Provenance {
            config_hash: hex::encode(Sha256::digest(config_bytes)),
            seeds,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TacReport {
    pub series: Vec<SeriesReport>,
    pub config: VerdictConfig,
    pub provenance: Provenance,
}

fn analyze_series(key: (usize, Topology, f64), rows: Vec<AggregateRow>, cfg: &VerdictConfig) -> SeriesReport {
    let (l, topology, gamma) = key;
    let unit = rows[0].tau_q_unit;
    let fit_points: Vec<FitPoint> = rows
        .iter()
        .filter(|r| r.mean_kinks >= cfg.window.min_kinks && (!r.external || r.n >= cfg.window.min_runs))
        .map(|r| FitPoint { tau: r.tau_q, kinks: r.mean_kinks, sem: r.sem })
        .collect();
    let mut gaps = Vec::new();
    let span = if fit_points.len() >= 2 {
        let lo = fit_points.iter().map(|p| p.tau).fold(f64::INFINITY, f64::min);
        let hi = fit_points.iter().map(|p| p.tau).fold(0.0, f64::max);
        (hi / lo).log10()
    } else {
        0.0
    };
    let crossover = if fit_points.len() < MIN_CROSSOVER_POINTS || span < MIN_CROSSOVER_DECADES {
        gaps.push(format!(
            "{} usable points spanning {span:.2} decades; need {MIN_CROSSOVER_POINTS} over {MIN_CROSSOVER_DECADES}",
            fit_points.len()
        ));
        None
    } else {
        crossover_detect(&fit_points, cfg.crossover)
            .map_err(|e| gaps.push(format!("crossover: {e}")))
            .ok()
    };
    let fit = fit_power_law(&fit_points, Weighting::Auto)
        .map_err(|e| gaps.push(format!("power-law fit: {e}")))
        .ok();
    let verdict = decide(crossover.as_ref(), fit.as_ref(), cfg);
    let overlay = if unit == TimeUnit::HbarOverJ {
        rows.iter().map(|r| predict(cfg.j_c, r.tau_q, l, cfg.thresholds)).collect()
    } else {
        Vec::new()
    };
    SeriesReport {
        l,
        topology,
        gamma,
        tau_q_unit: unit,
        n_fit_points: fit_points.len(),
        points: rows,
        fit,
        crossover,
        verdict,
        gaps,
        overlay,
    }
}

/// Aggregate records per `(L, topology, gamma, tau_Q)` and label each
/// `(L, topology, gamma)` series. Series too short for a verdict are kept
/// with their gaps listed.
pub fn tac_verdict(records: &[RunRecord], cfg: &VerdictConfig, provenance: Provenance) -> Result<TacReport> {
    if records.is_empty() {
        return Err(Error::Validation("no records to judge".into()));
    }
    let opts = AggregateOptions { extra_keys: vec![GroupField::Gamma, GroupField::Topology], collapse_reads: true };
    let rows = aggregate(records, &opts)?;
    let mut by_series: BTreeMap<(usize, Topology, u64), Vec<AggregateRow>> = BTreeMap::new();
    for r in rows {
        let gamma = r.gamma.unwrap_or(0.0);
        let topology = r.topology.expect("grouped by topology");
        by_series.entry((r.l, topology, gamma.to_bits())).or_default().push(r);
    }
    let series: Vec<SeriesReport> = by_series
        .into_par_iter()
        .map(|((l, topology, g), mut rows)| {
            rows.sort_by(|a, b| a.tau_q.total_cmp(&b.tau_q));
            analyze_series((l, topology, f64::from_bits(g)), rows, cfg)
        })
        .collect();
    Ok(TacReport { series, config: *cfg, provenance })
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Plain-text report followed by a CSV fit block.
pub fn write_report<W: Write>(report: &TacReport, mut out: W) -> Result<()> {
    let p = &report.provenance;
    writeln!(out, "taclab adiabaticity report")?;
    writeln!(out, "version: {}", p.version)?;
    writeln!(out, "config_sha256: {}", p.config_hash)?;
    let seeds: Vec<String> = p.seeds.iter().map(u64::to_string).collect();
    writeln!(out, "seeds: {}", seeds.join(" "))?;
    let c = &report.config;
    writeln!(
        out,
        "rules: KZM band [{}, {}], adiabatic residual ratio >= {}, fit window kinks >= {} with >= {} runs",
        c.kzm_band.0, c.kzm_band.1, c.adiabatic_ratio, c.window.min_kinks, c.window.min_runs
    )?;
    for s in &report.series {
        writeln!(out)?;
        writeln!(
            out,
            "[L = {} {} gamma = {}] tau_Q unit {}, {} points, {} in fit window",
            s.l,
            s.topology,
            s.gamma,
            s.tau_q_unit.as_str(),
            s.points.len(),
            s.n_fit_points
        )?;
        if let Some(f) = &s.fit {
            writeln!(out, "  power law: A = {} +- {}, x = {} +- {}, rms = {}", f.a, f.se_a, f.x, f.se_x, f.residual_rms)?;
        }
        if let Some(x) = &s.crossover {
            writeln!(
                out,
                "  crossover: tau_break = {}, tail {:?}, residual ratio = {}",
                x.tau_break, x.right_behavior, x.rss_ratio
            )?;
        }
        writeln!(out, "  verdict: {}", s.verdict.map_or("none (partial)", Verdict::as_str))?;
        for g in &s.gaps {
            writeln!(out, "  gap: {g}")?;
        }
        writeln!(out, "  tau_Q,mean_kinks,sem,n,theory_kinks,regime")?;
        for (i, r) in s.points.iter().enumerate() {
            let th = s.overlay.get(i);
            writeln!(
                out,
                "  {},{},{},{},{},{}",
                r.tau_q,
                r.mean_kinks,
                opt(r.sem),
                r.n,
                opt(th.map(|t| t.expected_kinks)),
                th.map_or("", |t| t.regime.as_str())
            )?;
        }
    }
    writeln!(out)?;
    writeln!(out, "# fit block")?;
    let mut w = csv::Writer::from_writer(&mut out);
    w.write_record([
        "L",
        "topology",
        "gamma",
        "A",
        "x",
        "se_A",
        "se_x",
        "residual_rms",
        "n_points",
        "tau_min",
        "tau_max",
        "tau_break",
        "rss_ratio",
        "verdict",
    ])?;
    for s in &report.series {
        let f = s.fit.as_ref();
        w.write_record([
            s.l.to_string(),
            s.topology.to_string(),
            s.gamma.to_string(),
            opt(f.map(|f| f.a)),
            opt(f.map(|f| f.x)),
            opt(f.map(|f| f.se_a)),
            opt(f.map(|f| f.se_x)),
            opt(f.map(|f| f.residual_rms)),
            opt(f.map(|f| f.n_points)),
            opt(f.map(|f| f.tau_min)),
            opt(f.map(|f| f.tau_max)),
            opt(s.crossover.map(|c| c.tau_break)),
            opt(s.crossover.map(|c| c.rss_ratio)),
            s.verdict.map_or(String::new(), |v| v.as_str().to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}
