use taclab::correlator::{evolve, CorrelatorState};
use taclab::model::{build_chain, AnnealSchedule, ChainInstance, DisorderSpec, Topology};
use taclab::oracle::{
    self, evolve_lindblad, evolve_pure, jw_correlators, DenseState, DephasingMode, OracleOptions,
};
use taclab::spectrum::{ground_state_correlators, instantaneous_gap};

fn max_diff(a: &CorrelatorState, b: &CorrelatorState) -> f64 {
    let dx = (a.x() - b.x()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let dy = (a.y() - b.y()).iter().map(|z| z.norm()).fold(0.0, f64::max);
    dx.max(dy)
}

fn dense_ground(chain: &ChainInstance, g: f64, j: f64) -> DenseState {
    let h = oracle::dense_hamiltonian(chain, g, j).unwrap();
    let eig = h.symmetric_eigen();
    let k = eig.eigenvalues.imin();
    let psi = eig.eigenvectors.column(k).map(|a| num_complex::Complex64::new(a, 0.0));
    DenseState::Pure { t: 0.0, l: chain.len(), psi }
}

#[test]
fn two_site_ground_state_correlators_match_dense() {
    let chain = ChainInstance::uniform(2, Topology::Open).unwrap();
    let ff = ground_state_correlators(&chain, 1.0, 1.0).unwrap();
    let dense = jw_correlators(&dense_ground(&chain, 1.0, 1.0));
    assert!(max_diff(&ff, &dense) < 1e-12, "{:?} vs {:?}", ff, dense);
}

#[test]
fn disordered_ground_state_correlators_match_dense() {
    for seed in 0..4 {
        let d = DisorderSpec::uniform(1.0, 0.5, seed);
        let chain = build_chain(6, Topology::Open, 1.0, 1.0, Some(&d)).unwrap();
        let ff = ground_state_correlators(&chain, 0.8, 1.0).unwrap();
        let dense = jw_correlators(&dense_ground(&chain, 0.8, 1.0));
        assert!(max_diff(&ff, &dense) < 1e-10);
    }
}

#[test]
fn single_kink_state_counts_one() {
    let st = DenseState::product_state(&[true, true, false, false]);
    let c = jw_correlators(&st);
    assert!((c.kink_number() - 1.0).abs() < 1e-12);
    let up = jw_correlators(&DenseState::product_state(&[true; 5]));
    assert!(up.kink_number().abs() < 1e-12);
}

#[test]
fn free_fermion_gap_matches_even_sector_on_grid() {
    for topology in [Topology::Open, Topology::Periodic] {
        for l in 2..=8 {
            let chain = ChainInstance::uniform(l, topology).unwrap();
            for k in 0..20 {
                let g = 3.0 * k as f64 / 19.0;
                let ff = instantaneous_gap(&chain, g, 1.0);
                let dense = oracle::even_sector_gap(&chain, g, 1.0).unwrap();
                assert!((ff - dense).abs() < 1e-8, "{topology} L={l} g={g}: {ff} vs {dense}");
            }
        }
    }
}

#[test]
fn disordered_gap_matches_even_sector() {
    for seed in 0..5 {
        let d = DisorderSpec::uniform(1.0, 0.3, seed);
        let chain = build_chain(6, Topology::Periodic, 1.0, 1.0, Some(&d)).unwrap();
        let ff = instantaneous_gap(&chain, 0.9, 1.0);
        let dense = oracle::even_sector_gap(&chain, 0.9, 1.0).unwrap();
        assert!((ff - dense).abs() < 1e-8);
    }
}

#[test]
fn strong_field_gap_is_four_g() {
    for l in 4..=8 {
        let chain = ChainInstance::uniform(l, Topology::Periodic).unwrap();
        let g = 1e3;
        let ff = instantaneous_gap(&chain, g, 1.0);
        let dense = oracle::even_sector_gap(&chain, g, 1.0).unwrap();
        assert!((ff / dense - 1.0).abs() < 1e-6);
        assert!((ff / (4.0 * g) - 1.0).abs() < 1e-3);
    }
}

#[test]
fn final_correlators_match_oracle_without_dephasing() {
    let chain = ChainInstance::uniform(5, Topology::Open).unwrap();
    let sched = AnnealSchedule::kz_ramp(1.0, 1.3).unwrap();
    let ff = evolve(&chain, &sched, 0.0, 1e-10, 1e-12).unwrap();
    let dense = evolve_pure(&chain, &sched, &OracleOptions::with_tolerances(1e-10, 1e-12)).unwrap();
    let reference = jw_correlators(&dense.state);
    assert!(max_diff(&ff.final_state, &reference) < 1e-7, "{}", max_diff(&ff.final_state, &reference));
}

#[test]
fn final_correlators_match_oracle_with_dephasing() {
    let chain = ChainInstance::uniform(4, Topology::Open).unwrap();
    let sched = AnnealSchedule::linear_ramp_g(1.0, 3.0).unwrap();
    let ff = evolve(&chain, &sched, 0.2, 1e-10, 1e-12).unwrap();
    let dense = evolve_lindblad(
        &chain,
        &sched,
        0.2,
        DephasingMode::SiteDephasing,
        &OracleOptions::with_tolerances(1e-10, 1e-12),
    )
    .unwrap();
    let reference = jw_correlators(&dense.state);
    assert!(max_diff(&ff.final_state, &reference) < 1e-7, "{}", max_diff(&ff.final_state, &reference));
}

#[test]
fn six_site_pure_kinks_agree() {
    let chain = ChainInstance::uniform(6, Topology::Open).unwrap();
    let sched = AnnealSchedule::kz_ramp(1.0, 2.0).unwrap();
    let ff = evolve(&chain, &sched, 0.0, 1e-9, 1e-11).unwrap();
    let dense = evolve_pure(&chain, &sched, &OracleOptions::default()).unwrap();
    let k = oracle::kink_expectation(&dense.state, &chain);
    assert!((ff.kinks - k).abs() < 1e-6, "{} vs {}", ff.kinks, k);
}

#[test]
fn six_site_dephased_kinks_agree() {
    let chain = ChainInstance::uniform(6, Topology::Open).unwrap();
    let sched = AnnealSchedule::linear_ramp_g(1.0, 4.0).unwrap();
    let ff = evolve(&chain, &sched, 0.1, 1e-9, 1e-11).unwrap();
    let dense =
        evolve_lindblad(&chain, &sched, 0.1, DephasingMode::SiteDephasing, &OracleOptions::default()).unwrap();
    let k = oracle::kink_expectation(&dense.state, &chain);
    assert!((ff.kinks - k).abs() < 1e-6, "{} vs {}", ff.kinks, k);
}
