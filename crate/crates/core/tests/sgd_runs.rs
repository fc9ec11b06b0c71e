use dualkf::optimizer::{CostOracle, SgdSettings, SimulatedSource, WindowRule};
use dualkf::sysmodel::burn_in_for_rate;
use dualkf::{dare_gain, initial_gain, sgd_run, Exec, StepPolicy, SystemModel};

#[test]
fn scalar_sgd_lands_near_the_kalman_gain() {
    let model = SystemModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.0);
    let public = model.public();
    let l_inf = dare_gain(&model, 1e-13, 100_000).unwrap().l_inf[(0, 0)];
    let l0 = initial_gain(&public).unwrap();
    assert_eq!(l0.l[(0, 0)], 0.0);
    let burn_in = burn_in_for_rate(l0.rho);
    let oracle = CostOracle::new(&model, false).unwrap();
    let settings = SgdSettings {
        schedule: StepPolicy::default(),
        batch_size: 64,
        iterations: 2000,
        window: WindowRule::Adaptive,
        exec: Exec::Parallel,
    };
    let hits = (0..20u64)
        .filter(|&seed| {
            let source = SimulatedSource::new(&model, burn_in, 1000 + seed).unwrap();
            let trace = sgd_run(&public, &source, &l0, &settings, Some(&oracle)).unwrap();
            assert!(trace.records.iter().all(|r| r.rho < 1.0));
            assert!(trace.records.iter().all(|r| r.gain_err.is_none()));
            (trace.final_gain()[(0, 0)] - l_inf).abs() <= 0.05
        })
        .count();
    assert!(hits >= 18, "{hits} of 20 seeds within 0.05");
}
