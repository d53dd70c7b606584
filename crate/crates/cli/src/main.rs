use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use taclab::analysis::{
    aggregate, crossover_detect, fit_power_law, ingest, write_aggregate, write_fit, write_records, write_row_errors,
    FitPoint, GroupField, RunRecord, Weighting,
};
use taclab::correlator::write_trajectory;
use taclab::model::{build_chain, derive_seed, DisorderSpec};
use taclab::spectrum::{gap_scan, gap_vs_length, write_gap_scan, write_gap_table};
use taclab::theory::{theory_overlay, write_overlay, RegimeThresholds};
use taclab::validation::{run_sweep, tac_verdict, write_report, Provenance, SweepPoint};

mod config;
mod failure;

use config::{keys_help, Config};
use failure::Failure;

#[derive(Debug, Parser)]
#[command(name = "taclab", version, about = "Quench simulations and kink-scaling analysis for transverse-field Ising chains")]
#[command(after_help = keys_help())]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML configuration file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable), e.g. --set chain.L=64
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory
    #[arg(long, default_value = "taclab-out", global = true)]
    out: PathBuf,
    /// Worker threads for sweeps (all cores when unset)
    #[arg(long, env = "TACLAB_WORKERS", global = true)]
    workers: Option<usize>,
    /// Base seed, overriding chain.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output format
    #[arg(long, value_enum, default_value_t = Format::Csv, global = true)]
    format: Format,
    /// More progress output on stderr (repeatable)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a single quench and write its record and kink trajectory
    Quench,
    /// Run the [sweep] grid in parallel and write records and aggregates
    Sweep,
    /// Scan the gap along the schedule, and versus L when gaps.L is set
    Gaps,
    /// Validate an external run-record CSV
    Ingest(InputArgs),
    /// Fit kink power laws and crossovers per series
    Fit(FitArgs),
    /// Build the adiabaticity report from run records
    Report(InputArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Run-record CSV
    #[arg(long)]
    input: PathBuf,
}

#[derive(Debug, Args)]
struct FitArgs {
    /// Run-record CSV
    #[arg(long)]
    input: PathBuf,
    /// Series keys: L (always used), gamma, topology, engine, chain_id
    #[arg(long, value_delimiter = ',')]
    group: Vec<String>,
}

struct Ctx {
    cfg: Config,
    out: PathBuf,
    workers: Option<usize>,
    verbose: u8,
    cancel: Arc<AtomicBool>,
}

impl Ctx {
    fn log(&self, level: u8, msg: impl AsRef<str>) {
        if self.verbose >= level {
            eprintln!("taclab: {}", msg.as_ref());
        }
    }

    fn create(&self, name: &str) -> Result<BufWriter<File>, Failure> {
        let path = self.out.join(name);
        let f = File::create(&path).map_err(|e| Failure::io(format!("{}: {e}", path.display())))?;
        self.log(1, format!("writing {}", path.display()));
        Ok(BufWriter::new(f))
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(f) = run(cli) {
        eprintln!("taclab: error[{}]: {}", f.label(), f.message.split_whitespace().collect::<Vec<_>>().join(" "));
        std::process::exit(f.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let g = cli.global;
    let Format::Csv = g.format;
    let mut cfg = Config::resolve(g.config.as_deref(), &g.overrides)?;
    if let Some(seed) = g.seed {
        cfg.chain.seed = seed;
    }
    if g.workers == Some(0) {
        return Err(Failure::config("--workers must be at least 1"));
    }
    fs::create_dir_all(&g.out).map_err(|e| Failure::io(format!("{}: {e}", g.out.display())))?;
    fs::write(g.out.join("resolved_config.toml"), cfg.to_toml())?;

    let cancel = Arc::new(AtomicBool::new(false));
    {
        let flag = cancel.clone();
        // A second handler cannot be installed in the same process; ignore that case.
        let _ = ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst));
    }
    let ctx = Ctx { cfg, out: g.out, workers: g.workers, verbose: g.verbose, cancel };
    match cli.command {
        Command::Quench => quench(&ctx),
        Command::Sweep => sweep(&ctx),
        Command::Gaps => gaps(&ctx),
        Command::Ingest(a) => ingest_cmd(&ctx, &a.input),
        Command::Fit(a) => fit_cmd(&ctx, &a),
        Command::Report(a) => report_cmd(&ctx, &a.input),
    }
}

fn quench(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    let plan = cfg.quench_plan()?;
    plan.validate()?;
    let point = SweepPoint {
        l: cfg.chain.l,
        tau_q: cfg.schedule.tau_q,
        gamma: cfg.engine.gamma,
        delta: cfg.chain.disorder,
        replica: 0,
        seed: derive_seed(cfg.chain.seed, 0),
    };
    ctx.log(1, format!("quench L = {} on the {} engine", point.l, plan.route(point.l).as_str()));
    let run = match plan.run_point_detailed(&point, cfg.engine.n_samples, Some(ctx.cancel.clone())) {
        Err(_) if ctx.cancel.load(Ordering::SeqCst) => return Err(Failure::interrupted()),
        r => r?,
    };
    for w in &run.warnings {
        eprintln!("taclab: warning: {w}");
    }
    write_records(std::slice::from_ref(&run.record), ctx.create("records.csv")?)?;
    write_trajectory(&run.trajectory, ctx.create("trajectory.csv")?)?;
    println!("kinks = {}", run.record.kinks()?);
    Ok(())
}

fn sweep(ctx: &Ctx) -> Result<(), Failure> {
    let plan = ctx.cfg.sweep_plan()?;
    plan.validate()?;
    ctx.log(1, format!("sweep over {} points", plan.points().len()));
    let outcome = run_sweep(&plan, ctx.workers, Some(ctx.cancel.clone()))?;
    write_records(&outcome.records, ctx.create("records.csv")?)?;
    if !outcome.records.is_empty() {
        let rows = aggregate(&outcome.records, &ctx.cfg.aggregate_options())?;
        write_aggregate(&rows, ctx.create("aggregate.csv")?)?;
    }
    let th = RegimeThresholds { k_lo: ctx.cfg.analysis.k_lo, k_hi: ctx.cfg.analysis.k_hi };
    for &l in &plan.lengths {
        let overlay = theory_overlay(ctx.cfg.analysis.j_c, l, &plan.tau_qs, th);
        write_overlay(&overlay, l, ctx.create(&format!("theory_L{l}.csv"))?)?;
    }
    if !outcome.failures.is_empty() {
        let mut w = ctx.create("failures.csv")?;
        writeln!(w, "L,tau_Q,gamma,disorder,seed,category,message")?;
        for f in &outcome.failures {
            let p = &f.point;
            writeln!(
                w,
                "{},{},{},{},{},{},\"{}\"",
                p.l,
                p.tau_q,
                p.gamma,
                p.delta,
                p.seed,
                f.category.as_str(),
                f.message.replace('"', "'")
            )?;
        }
        w.flush()?;
    }
    println!("{} records, {} failures", outcome.records.len(), outcome.failures.len());
    if outcome.cancelled > 0 {
        return Err(Failure::interrupted());
    }
    if let Some(f) = outcome.failures.first() {
        return Err(Failure {
            category: failure::Category::Core(f.category),
            message: format!("{} sweep points failed; first: {}", outcome.failures.len(), f.message),
        });
    }
    Ok(())
}

fn gaps(ctx: &Ctx) -> Result<(), Failure> {
    let cfg = &ctx.cfg;
    let schedule = cfg.schedule()?;
    let disorder = (cfg.chain.disorder > 0.0).then(|| DisorderSpec::uniform(1.0, cfg.chain.disorder, cfg.chain.seed));
    let chain = build_chain(cfg.chain.l, cfg.chain.topology, 1.0, 1.0, disorder.as_ref())?;
    let scan = gap_scan(&chain, &schedule, cfg.gaps.n_samples)?;
    write_gap_scan(&scan, ctx.create("gap_scan.csv")?)?;
    println!("L = {}: minimum gap {} at s = {}", cfg.chain.l, scan.gap_at_s_c, scan.s_c);
    if scan.boundary_minimum {
        eprintln!("taclab: warning: the gap minimum sits at an end of the schedule");
    }
    if !cfg.gaps.lengths.is_empty() {
        let rows = gap_vs_length(&cfg.gaps.lengths, cfg.chain.topology, &schedule, cfg.gaps.n_samples)?;
        write_gap_table(&rows, ctx.create("gap_vs_L.csv")?)?;
        if rows.len() >= 3 {
            let pts: Vec<FitPoint> = rows.iter().map(|r| FitPoint::new(r.l as f64, r.gap)).collect();
            let fit = fit_power_law(&pts, Weighting::Uniform)?;
            write_fit(&fit, ctx.create("gap_fit.csv")?)?;
            println!("gap ~ {} L^-{} (se {})", fit.a, fit.x, fit.se_x);
        }
    }
    Ok(())
}

fn read_records(ctx: &Ctx, input: &Path) -> Result<Vec<RunRecord>, Failure> {
    let f = File::open(input).map_err(|e| Failure::io(format!("{}: {e}", input.display())))?;
    let report = ingest(f)?;
    if !report.errors.is_empty() {
        write_row_errors(&report.errors, ctx.create("ingest_errors.csv")?)?;
        eprintln!(
            "taclab: warning: {} rows rejected (see ingest_errors.csv); first at line {}: {}",
            report.errors.len(),
            report.errors[0].line,
            report.errors[0].message
        );
    }
    Ok(report.records)
}

fn ingest_cmd(ctx: &Ctx, input: &Path) -> Result<(), Failure> {
    let f = File::open(input).map_err(|e| Failure::io(format!("{}: {e}", input.display())))?;
    let report = ingest(f)?;
    write_records(&report.records, ctx.create("records.csv")?)?;
    write_row_errors(&report.errors, ctx.create("ingest_errors.csv")?)?;
    println!("{} records accepted, {} rejected", report.records.len(), report.errors.len());
    match report.errors.first() {
        Some(e) => Err(Failure::validation(format!(
            "{} rows rejected; first at line {}: {}",
            report.errors.len(),
            e.line,
            e.message
        ))),
        None => Ok(()),
    }
}

fn parse_group(name: &str) -> Result<Option<GroupField>, Failure> {
    Ok(match name {
        "L" | "tau_Q" => None,
        "gamma" => Some(GroupField::Gamma),
        "topology" => Some(GroupField::Topology),
        "engine" => Some(GroupField::Engine),
        "chain_id" => Some(GroupField::ChainId),
        other => return Err(Failure::config(format!("unknown group key `{other}`"))),
    })
}

fn fit_cmd(ctx: &Ctx, args: &FitArgs) -> Result<(), Failure> {
    let records = read_records(ctx, &args.input)?;
    if records.is_empty() {
        return Err(Failure::validation("no valid records to fit"));
    }
    let mut opts = ctx.cfg.aggregate_options();
    for g in &args.group {
        if let Some(f) = parse_group(g)? {
            if !opts.extra_keys.contains(&f) {
                opts.extra_keys.push(f);
            }
        }
    }
    let rows = aggregate(&records, &opts)?;
    write_aggregate(&rows, ctx.create("aggregate.csv")?)?;

    let window = ctx.cfg.verdict_config().window;
    let mut series: Vec<(String, Vec<FitPoint>)> = Vec::new();
    for r in &rows {
        let label = format!(
            "L={}{}{}{}{}",
            r.l,
            r.gamma.map_or(String::new(), |g| format!(";gamma={g}")),
            r.topology.map_or(String::new(), |t| format!(";topology={t}")),
            r.engine.map_or(String::new(), |e| format!(";engine={}", e.as_str())),
            r.chain_id.as_ref().map_or(String::new(), |c| format!(";chain_id={c}")),
        );
        if r.mean_kinks < window.min_kinks || (r.external && r.n < window.min_runs) {
            continue;
        }
        let p = FitPoint { tau: r.tau_q, kinks: r.mean_kinks, sem: r.sem };
        match series.iter_mut().find(|(k, _)| *k == label) {
            Some((_, v)) => v.push(p),
            None => series.push((label, vec![p])),
        }
    }

    let mut w = ctx.create("fits.csv")?;
    writeln!(w, "series,A,x,se_A,se_x,residual_rms,n_points,tau_min,tau_max,tau_break,right_behavior,rss_ratio")?;
    let mut fitted = 0;
    for (label, pts) in &series {
        let fit = match fit_power_law(pts, Weighting::Auto) {
            Ok(f) => f,
            Err(e) => {
                eprintln!("taclab: warning: {label}: {e}");
                continue;
            }
        };
        fitted += 1;
        let cross = crossover_detect(pts, ctx.cfg.verdict_config().crossover).ok();
        writeln!(
            w,
            "{label},{},{},{},{},{},{},{},{},{},{},{}",
            fit.a,
            fit.x,
            fit.se_a,
            fit.se_x,
            fit.residual_rms,
            fit.n_points,
            fit.tau_min,
            fit.tau_max,
            cross.map_or(String::new(), |c| c.tau_break.to_string()),
            cross.map_or(String::new(), |c| format!("{:?}", c.right_behavior).to_lowercase()),
            cross.map_or(String::new(), |c| c.rss_ratio.to_string()),
        )?;
        println!("{label}: x = {} +- {}, A = {} +- {}", fit.x, fit.se_x, fit.a, fit.se_a);
    }
    w.flush()?;
    if fitted == 0 {
        return Err(Failure::numerical("no series had enough points for a fit"));
    }
    Ok(())
}

fn report_cmd(ctx: &Ctx, input: &Path) -> Result<(), Failure> {
    let records = read_records(ctx, input)?;
    if records.is_empty() {
        return Err(Failure::validation("no valid records to judge"));
    }
    let provenance = Provenance::new(ctx.cfg.to_toml().as_bytes(), records.iter().map(|r| r.seed).collect());
    let report = tac_verdict(&records, &ctx.cfg.verdict_config(), provenance)?;
    let mut w = ctx.create("report.txt")?;
    write_report(&report, &mut w)?;
    w.flush()?;
    for s in &report.series {
        println!(
            "L = {} {} gamma = {}: {}",
            s.l,
            s.topology,
            s.gamma,
            s.verdict.map_or("partial", |v| v.as_str())
        );
    }
    Ok(())
}
