//! Acceptance criteria. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any fail.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use taclab::analysis::{
    energy_to_kinks, fit_exponential, fit_power_law, ingest, kinks_to_energy, write_records, crossover_detect,
    CrossoverOptions, Engine, EnergyUnit, FitPoint, RunRecord, TimeUnit, Weighting,
};
use taclab::correlator::evolve;
use taclab::model::{AnnealSchedule, ChainInstance, Topology};
use taclab::oracle::{
    evolve_lindblad, evolve_pure, excitation_probability, kink_expectation, DephasingMode, OracleOptions,
};
use taclab::spectrum::{gap_scan, instantaneous_gap};
use taclab::theory::{adiabatic_timescale, avron_extract_q, kzm_density, log_grid, lz_probability};
use taclab::validation::{tac_verdict, Provenance, Verdict, VerdictConfig};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn tight() -> OracleOptions {
    OracleOptions::with_tolerances(1e-10, 1e-12)
}

fn kzm_scaling() -> Outcome {
    let l = 200;
    let chain = ChainInstance::uniform(l, Topology::Open).map_err(|e| e.to_string())?;
    let run = |make: fn(f64, f64) -> taclab::Result<AnnealSchedule>, taus: &[f64]| -> Result<(Vec<FitPoint>, f64, Vec<String>), String> {
        let mut pts = Vec::new();
        let mut worst: f64 = 0.0;
        let mut lines = Vec::new();
        for &tau in taus {
            let r = evolve(&chain, &make(1.0, tau).map_err(|e| e.to_string())?, 0.0, 1e-8, 1e-10)
                .map_err(|e| e.to_string())?;
            let ratio = (r.kinks / l as f64) / kzm_density(1.0, tau);
            worst = worst.max((ratio - 1.0).abs());
            lines.push(format!("tau={tau:.3} kinks={:.3} ratio={ratio:.4}", r.kinks));
            pts.push(FitPoint::new(tau, r.kinks));
        }
        Ok((pts, worst, lines))
    };

    // The ramp starts from the ground state at g = J; its kink window [5, 20]
    // sits at tau ~ 1..7.5.
    let (pts, worst, lines) = run(AnnealSchedule::linear_ramp_g, &log_grid(1.1, 7.0, 6))?;
    let in_window = pts.iter().all(|p| (5.0..=20.0).contains(&p.kinks));
    let fit = fit_power_law(&pts, Weighting::Auto).map_err(|e| e.to_string())?;

    // Full crossing from g = 2J, reported for comparison only.
    let (kz_pts, kz_worst, _) = run(AnnealSchedule::kz_ramp, &log_grid(1.6, 16.0, 6))?;
    let kz_fit = fit_power_law(&kz_pts, Weighting::Auto).map_err(|e| e.to_string())?;

    check(
        in_window && (fit.x - 0.5).abs() <= 0.05 && worst <= 0.10,
        format!(
            "linear_ramp_g: x = {:.4} +- {:.4}, worst pointwise deviation {:.2}%, kinks within [5, 20]: {in_window}; [{}]; kz_ramp comparison: x = {:.4}, worst deviation {:.2}%",
            fit.x,
            fit.se_x,
            100.0 * worst,
            lines.join("; "),
            kz_fit.x,
            100.0 * kz_worst
        ),
    )
}

fn lz_suppression() -> Outcome {
    let l = 8;
    let chain = ChainInstance::uniform(l, Topology::Periodic).map_err(|e| e.to_string())?;
    let tau_ad = adiabatic_timescale(1.0, l);
    let p_at = |tau: f64| -> Result<f64, String> {
        let sched = AnnealSchedule::smooth_crossing(1.0, tau, 257).map_err(|e| e.to_string())?;
        let run = evolve_pure(&chain, &sched, &tight()).map_err(|e| e.to_string())?;
        excitation_probability(&run.state, &chain, 0.0, 1.0).map_err(|e| e.to_string())
    };
    let mut pts = Vec::new();
    for k in 0..6 {
        let tau = tau_ad * (2.0 + 8.0 * k as f64 / 5.0);
        pts.push(FitPoint::new(tau, p_at(tau)?));
    }
    let exp = fit_exponential(&pts, Weighting::Uniform).map_err(|e| e.to_string())?;
    let slope_ratio = exp.rate * tau_ad;
    let p_ad = p_at(tau_ad)?;
    let p_ratio = p_ad / (-1.0f64).exp();
    check(
        (slope_ratio - 1.0).abs() <= 0.15 && (p_ratio - 1.0).abs() <= 0.20,
        format!(
            "tau_AD = {tau_ad:.4}; -ln p slope / (2 pi^3 J / L^2) = {slope_ratio:.4}; p(tau_AD) = {p_ad:.4} (e^-1 ratio {p_ratio:.4}); p = [{}]",
            pts.iter().map(|p| format!("{:.3e}", p.kinks)).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn crossover_location() -> Outcome {
    let l = 10;
    let chain = ChainInstance::uniform(l, Topology::Periodic).map_err(|e| e.to_string())?;
    let tau_ad = adiabatic_timescale(1.0, l);
    let mut pts = Vec::new();
    for tau in log_grid(0.02 * tau_ad, 8.0 * tau_ad, 16) {
        let sched = AnnealSchedule::smooth_crossing(1.0, tau, 257).map_err(|e| e.to_string())?;
        let run = evolve_pure(&chain, &sched, &tight()).map_err(|e| e.to_string())?;
        pts.push(FitPoint::new(tau, kink_expectation(&run.state, &chain)));
    }
    let c = crossover_detect(&pts, CrossoverOptions::default()).map_err(|e| e.to_string())?;
    let ratio = c.tau_break / tau_ad;

    // Curve built from the closed-form KZM and LZ laws, for comparison only.
    let formula: Vec<FitPoint> = pts
        .iter()
        .map(|p| {
            let k = if p.tau < tau_ad { l as f64 * kzm_density(1.0, p.tau) } else { 2.0 * lz_probability(1.0, p.tau, l) };
            FitPoint::new(p.tau, k)
        })
        .collect();
    let f = crossover_detect(&formula, CrossoverOptions::default()).map_err(|e| e.to_string())?;
    check(
        (0.5..=2.0).contains(&ratio),
        format!(
            "tau_break = {:.4}, tau_AD = {tau_ad:.4}, ratio {ratio:.3}, tail {:?}, left exponent {:?}; kinks = [{}]; closed-form composite ratio {:.3}",
            c.tau_break,
            c.right_behavior,
            c.left_exponent,
            pts.iter().map(|p| format!("{:.3e}", p.kinks)).collect::<Vec<_>>().join(", "),
            f.tau_break / tau_ad
        ),
    )
}

fn oracle_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut where_worst = String::new();
    let mut runs = 0;
    for l in 4..=7 {
        let chain = ChainInstance::uniform(l, Topology::Open).map_err(|e| e.to_string())?;
        let schedules = [
            ("linear_ramp_g", AnnealSchedule::linear_ramp_g(1.0, 3.0)),
            ("kz_ramp", AnnealSchedule::kz_ramp(1.0, 1.5)),
            ("smooth", AnnealSchedule::smooth_crossing(1.0, 1.0, 257)),
        ];
        for (name, sched) in schedules {
            let sched = sched.map_err(|e| e.to_string())?;
            for gamma in [0.0, 0.1, 0.5] {
                let ff = evolve(&chain, &sched, gamma, 1e-10, 1e-12).map_err(|e| e.to_string())?;
                let run = if gamma == 0.0 {
                    evolve_pure(&chain, &sched, &tight())
                } else {
                    evolve_lindblad(&chain, &sched, gamma, DephasingMode::SiteDephasing, &tight())
                }
                .map_err(|e| e.to_string())?;
                let d = (ff.kinks - kink_expectation(&run.state, &chain)).abs();
                runs += 1;
                if d > worst {
                    worst = d;
                    where_worst = format!("L={l} {name} gamma={gamma}");
                }
            }
        }
    }
    check(worst <= 1e-5, format!("{runs} runs, max |dkinks| = {worst:.3e} at {where_worst}"))
}

fn anti_kz_saturation() -> Outcome {
    let l = 100;
    let gamma = 0.1;
    let chain = ChainInstance::uniform(l, Topology::Open).map_err(|e| e.to_string())?;
    let taus = [0.1, 0.3, 1.0, 3.0, 10.0, 30.0, 100.0, 300.0];
    let mut kinks = Vec::new();
    for &tau in &taus {
        let sched = AnnealSchedule::linear_ramp_g(1.0, tau).map_err(|e| e.to_string())?;
        kinks.push(evolve(&chain, &sched, gamma, 1e-8, 1e-10).map_err(|e| e.to_string())?.kinks);
    }
    let imin = (0..kinks.len()).min_by(|&a, &b| kinks[a].total_cmp(&kinks[b])).unwrap();
    let non_monotone = imin > 0 && imin < kinks.len() - 1 && kinks[0] > kinks[imin] && *kinks.last().unwrap() > kinks[imin];
    let target = (l as f64 - 1.0) / 2.0;
    let last = *kinks.last().unwrap();
    let sat = (last / target - 1.0).abs() <= 0.05;

    let ring = ChainInstance::uniform(4, Topology::Periodic).map_err(|e| e.to_string())?;
    let sched = AnnealSchedule::linear_ramp_g(1.0, 300.0).map_err(|e| e.to_string())?;
    let run = evolve_lindblad(&ring, &sched, gamma, DephasingMode::SiteDephasing, &OracleOptions::default())
        .map_err(|e| e.to_string())?;
    let ring_kinks = kink_expectation(&run.state, &ring);
    let ring_ok = (ring_kinks / 2.0 - 1.0).abs() <= 0.05;
    check(
        non_monotone && sat && ring_ok,
        format!(
            "L=100 gamma=0.1 kinks = [{}] (min at tau={}), saturation {last:.3} vs {target}; L=4 ring {ring_kinks:.4} vs 2",
            kinks.iter().map(|k| format!("{k:.3}")).collect::<Vec<_>>().join(", "),
            taus[imin]
        ),
    )
}

fn gap_law() -> Outcome {
    let mut pts = Vec::new();
    for l in [64, 128, 256, 512] {
        let chain = ChainInstance::uniform(l, Topology::Periodic).map_err(|e| e.to_string())?;
        pts.push(FitPoint::new(l as f64, instantaneous_gap(&chain, 1.0, 1.0)));
    }
    let fit = fit_power_law(&pts, Weighting::Uniform).map_err(|e| e.to_string())?;
    // The minimum along a ramp sits at the critical point for the largest size.
    let chain = ChainInstance::uniform(128, Topology::Periodic).map_err(|e| e.to_string())?;
    let scan = gap_scan(&chain, &AnnealSchedule::kz_ramp(1.0, 1.0).map_err(|e| e.to_string())?, 201)
        .map_err(|e| e.to_string())?;
    check(
        (fit.x - 1.0).abs() <= 0.02,
        format!(
            "x = {:.5} +- {:.1e}; coefficient Delta*L/J = {:.5} (2 pi = {:.5}, ratio {:.4}); L=128 ramp minimum at g/J = {:.4}",
            fit.x,
            fit.se_x,
            fit.a,
            2.0 * std::f64::consts::PI,
            fit.a / (2.0 * std::f64::consts::PI),
            2.0 * (1.0 - scan.s_c)
        ),
    )
}

fn eigenbasis_dephasing() -> Outcome {
    let l = 4;
    let gamma = 0.05;
    let chain = ChainInstance::uniform(l, Topology::Periodic).map_err(|e| e.to_string())?;
    let mut pts = Vec::new();
    let mut qs = Vec::new();
    let delta = {
        let sched = AnnealSchedule::smooth_crossing(1.0, 1.0, 257).map_err(|e| e.to_string())?;
        gap_scan(&chain, &sched, 401).map_err(|e| e.to_string())?.gap_at_s_c / 2.0
    };
    for tau in log_grid(20.0, 320.0, 5) {
        let sched = AnnealSchedule::smooth_crossing(1.0, tau, 257).map_err(|e| e.to_string())?;
        let run = evolve_lindblad(&chain, &sched, gamma, DephasingMode::EigenbasisDephasing, &tight())
            .map_err(|e| e.to_string())?;
        let p = excitation_probability(&run.state, &chain, 0.0, 1.0).map_err(|e| e.to_string())?;
        pts.push(FitPoint::new(tau, p));
        qs.push(avron_extract_q(p, delta, gamma, 1.0 / tau).map_err(|e| e.to_string())?);
    }
    let fit = fit_power_law(&pts, Weighting::Uniform).map_err(|e| e.to_string())?;
    check(
        (fit.x - 1.0).abs() <= 0.1,
        format!(
            "log-log slope = {:.4} +- {:.1e}; p = [{}]; Q (report only, anchor ~0.65) = [{}]",
            -fit.x,
            fit.se_x,
            pts.iter().map(|p| format!("{:.3e}", p.kinks)).collect::<Vec<_>>().join(", "),
            qs.iter().map(|q| format!("{q:.3}")).collect::<Vec<_>>().join(", ")
        ),
    )
}

fn random_record(rng: &mut ChaCha8Rng, i: usize) -> (RunRecord, f64) {
    let l = rng.random_range(2..500usize);
    let topology = if rng.random_bool(0.5) { Topology::Open } else { Topology::Periodic };
    let n = topology.n_bonds(l);
    let j = rng.random_range(0.05..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let kinks = rng.random_range(0.0..=n as f64);
    let rec = RunRecord {
        chain_id: format!("c{i}"),
        engine: Engine::External,
        l,
        topology,
        n_couplings: n,
        j_max: j,
        tau_q: rng.random_range(0.1..1000.0),
        tau_q_unit: if rng.random_bool(0.5) { TimeUnit::Microseconds } else { TimeUnit::HbarOverJ },
        final_energy: kinks_to_energy(kinks, n, j),
        energy_unit: if rng.random_bool(0.5) { EnergyUnit::Ghz } else { EnergyUnit::J },
        gamma: 0.0,
        seed: rng.random(),
        realization_id: format!("r{i}"),
    };
    (rec, kinks)
}

fn energy_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pairs: Vec<(RunRecord, f64)> = (0..1000).map(|i| random_record(&mut rng, i)).collect();
    let recs: Vec<RunRecord> = pairs.iter().map(|p| p.0.clone()).collect();
    let mut buf = Vec::new();
    write_records(&recs, &mut buf).map_err(|e| e.to_string())?;
    let back = ingest(buf.as_slice()).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for ((rec, kinks), parsed) in pairs.iter().zip(&back.records) {
        let k = energy_to_kinks(parsed.final_energy, parsed.n_couplings, parsed.j_max).map_err(|e| e.to_string())?;
        let e = kinks_to_energy(k, rec.n_couplings, rec.j_max);
        worst = worst.max((k - kinks).abs()).max((e - rec.final_energy).abs());
    }
    check(
        back.records.len() == 1000 && back.errors.is_empty() && worst <= 1e-10,
        format!("{} records back, {} errors, max round-trip error {worst:.2e}", back.records.len(), back.errors.len()),
    )
}

fn fitter_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let taus = log_grid(1.0, 100.0, 20);
    let mut covered = 0;
    for _ in 0..1000 {
        let pts: Vec<FitPoint> =
            taus.iter().map(|&t| FitPoint::new(t, 4.0 / t * (1.0 + noise.sample(&mut rng)))).collect();
        let f = fit_power_law(&pts, Weighting::Auto).map_err(|e| e.to_string())?;
        if (f.x - 1.0).abs() <= 3.0 * f.se_x {
            covered += 1;
        }
    }
    check(covered >= 950, format!("{covered}/1000 trials within 3 standard errors"))
}

fn pipeline_verdicts() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let noise = Normal::new(0.0, 0.02).unwrap();
    let mut recs = Vec::new();
    let mut push = |l: usize, taus: &[f64], law: &dyn Fn(f64) -> f64, rng: &mut ChaCha8Rng| {
        for &t in taus {
            for r in 0..3 {
                let k = law(t) * (1.0 + noise.sample(rng));
                recs.push(RunRecord {
                    chain_id: format!("L{l}"),
                    engine: Engine::External,
                    l,
                    topology: Topology::Open,
                    n_couplings: l - 1,
                    j_max: 1.0,
                    tau_q: t,
                    tau_q_unit: TimeUnit::HbarOverJ,
                    final_energy: kinks_to_energy(k, l - 1, 1.0),
                    energy_unit: EnergyUnit::J,
                    gamma: 0.0,
                    seed: r,
                    realization_id: format!("r{r}"),
                });
            }
        }
    };
    let tad = adiabatic_timescale(1.0, 10);
    push(10, &log_grid(0.07 * tad, 7.0 * tad, 12), &|t| 2.0 * (-t / tad).exp(), &mut rng);
    push(200, &log_grid(1.0, 1000.0, 12), &|t| 200.0 * kzm_density(1.0, t), &mut rng);
    push(50, &log_grid(1.0, 1000.0, 12), &|t| 40.0 / t, &mut rng);

    let mut buf = Vec::new();
    write_records(&recs, &mut buf).map_err(|e| e.to_string())?;
    let parsed = ingest(buf.as_slice()).map_err(|e| e.to_string())?;
    let rep = tac_verdict(&parsed.records, &VerdictConfig::default(), Provenance::new(b"acceptance", vec![10]))
        .map_err(|e| e.to_string())?;
    let label = |l: usize| rep.series.iter().find(|s| s.l == l).and_then(|s| s.verdict);
    let got = [(10, label(10)), (200, label(200)), (50, label(50))];
    let want = [Verdict::Adiabatic, Verdict::KzmLimited, Verdict::Anomalous];
    check(
        got.iter().zip(want).all(|((_, g), w)| *g == Some(w)),
        format!(
            "{}",
            got.iter()
                .map(|(l, v)| format!("L={l}: {}", v.map_or("partial", |v| v.as_str())))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

fn main() {
    let criteria: [(&str, &str, fn() -> Outcome); 10] = [
        ("C1", "KZM scaling of the kink density", kzm_scaling),
        ("C2", "Landau-Zener suppression", lz_suppression),
        ("C3", "crossover location", crossover_location),
        ("C4", "correlator and oracle agree", oracle_equivalence),
        ("C5", "anti-KZ saturation under dephasing", anti_kz_saturation),
        ("C6", "critical gap scales as 1/L", gap_law),
        ("C7", "eigenbasis dephasing slope", eigenbasis_dephasing),
        ("C8", "energy to kink round trip", energy_round_trip),
        ("C9", "power-law fitter calibration", fitter_calibration),
        ("C10", "pipeline verdict labels", pipeline_verdicts),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| f == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = run();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
