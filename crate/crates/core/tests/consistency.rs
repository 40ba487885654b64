mod common;

use dd_iss::consistency::{
    build_sample_quadrics, membership_ellipsoid, membership_exact, rank_check, solve_overapproximation, ConsistencyError,
};
use dd_iss::data::{Dataset, Sample};
use dd_iss::experiment::{generate_dataset, ExperimentConfig};
use dd_iss::sdp::{SdpStatus, SolverConfig};

#[test]
fn benchmark_model_contains_every_consistent_system() {
    let cfg = ExperimentConfig::benchmark();
    let ds = generate_dataset(&cfg).unwrap();
    let sys = cfg.true_system().unwrap();
    let model = solve_overapproximation(&build_sample_quadrics(&ds, &cfg.library).unwrap(), &cfg.solver).unwrap();
    model.validate().unwrap();
    assert!(membership_ellipsoid(&sys.ab(), &model).unwrap().member);
    for ab in common::exact_members(&sys.ab(), &ds, &cfg.library, 100, 11) {
        assert!(membership_exact(&ab, &ds, &cfg.library).unwrap());
        let r = membership_ellipsoid(&ab, &model).unwrap();
        assert!(r.member, "consistent model outside the ellipsoid: max eig {}", r.max_eig);
    }
    common::boundary_round_trip(&model, 5).unwrap();
}

#[test]
fn zero_noise_data_keeps_the_true_system() {
    let mut cfg = ExperimentConfig::benchmark();
    cfg.collection.noise = dd_iss::data::SignalSpec::Zero;
    cfg.delta = 0.25;
    let ds = generate_dataset(&cfg).unwrap();
    let sys = cfg.true_system().unwrap();
    assert!(membership_exact(&sys.ab(), &ds, &cfg.library).unwrap());
    let model = solve_overapproximation(&build_sample_quadrics(&ds, &cfg.library).unwrap(), &cfg.solver).unwrap();
    assert!(membership_ellipsoid(&sys.ab(), &model).unwrap().member);
}

#[test]
fn too_few_samples_are_rank_deficient() {
    let mut cfg = ExperimentConfig::benchmark();
    cfg.collection.initial_states.truncate(1);
    cfg.collection.samples_per_trajectory = 3;
    let ds = generate_dataset(&cfg).unwrap();
    let r = rank_check(&ds, &cfg.library).unwrap();
    assert!(!r.full_row_rank);
    assert_eq!((r.rows, r.samples), (5, 3));
}

#[test]
fn duplicated_samples_are_rank_deficient() {
    let s = Sample { t: 0.0, x: vec![1.0, 2.0], u: vec![0.5], xdot: vec![0.0, 0.0] };
    let ds = Dataset::new(vec![s; 20], 1.0).unwrap();
    let r = rank_check(&ds, &ExperimentConfig::benchmark().library).unwrap();
    assert!(!r.full_row_rank);
}

#[test]
fn solver_stall_has_its_own_guidance() {
    let cfg = ExperimentConfig::benchmark();
    let ds = generate_dataset(&cfg).unwrap();
    let q = build_sample_quadrics(&ds, &cfg.library).unwrap();
    let solver = SolverConfig { max_iter: 2, ..SolverConfig::default() };
    match solve_overapproximation(&q, &solver) {
        Err(ConsistencyError::Infeasible { status: SdpStatus::NumericalFailure, guidance }) => {
            assert!(guidance.contains("solver stalled"), "{guidance}");
        }
        other => panic!("expected a numerical failure, got {other:?}"),
    }
}

#[test]
fn empty_dataset_is_reported() {
    assert!(matches!(
        solve_overapproximation(&[], &SolverConfig::default()),
        Err(ConsistencyError::Infeasible { .. })
    ));
}
