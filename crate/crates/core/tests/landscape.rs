use dualkf::gradcheck::{random_observable_system, random_stabilizing_gain};
use dualkf::objective::sample_sublevel_set;
use dualkf::optimizer::StopCriteria;
use dualkf::rng::rng_from_seed;
use dualkf::{cost, dare_gain, gd_run, mass_spring_model, GainPolicy, Matrix, StepPolicy, SystemModel};

fn l_inf(model: &SystemModel) -> GainPolicy {
    let sol = dare_gain(model, 1e-13, 100_000).unwrap();
    GainPolicy::for_model(model, sol.l_inf).unwrap()
}

#[test]
fn multistart_gd_reaches_a_single_gain() {
    for (model, seed) in [
        (mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap(), 1),
        (random_observable_system(&mut rng_from_seed(77), 3, 2), 2),
    ] {
        let mut rng = rng_from_seed(seed);
        let stop = StopCriteria {
            grad_tol: 1e-9,
            max_iter: 5_000,
        };
        let finals: Vec<Matrix> = (0..10)
            .map(|_| {
                let l0 = random_stabilizing_gain(&model, &mut rng, 0.5, 0.99).unwrap();
                let trace = gd_run(&model, &l0, &StepPolicy::backtracking(1.0), &stop).unwrap();
                trace.final_gain().clone()
            })
            .collect();
        for a in &finals {
            for b in &finals {
                assert!((a - b).norm() <= 1e-6, "{a} vs {b}");
            }
        }
        assert!((&finals[0] - l_inf(&model).l).norm() <= 1e-6);
    }
}

#[test]
fn gradient_dominates_the_gap_on_sampled_sublevel_sets() {
    let models = [
        SystemModel::scalar(0.9, 1.0, 1.0, 1.0, 1.0, 0.0),
        mass_spring_model(0.1, 1.0, 0.1, 0.1, 0.05).unwrap(),
        random_observable_system(&mut rng_from_seed(5), 4, 2),
    ];
    for model in models {
        let star = l_inf(&model);
        let l0 = GainPolicy::for_model(&model, Matrix::zeros(model.n(), model.m())).unwrap();
        let level = if l0.stabilizing {
            2.0 * cost(&model, &l0).unwrap().j
        } else {
            2.0 * cost(&model, &star).unwrap().j
        };
        let summary = sample_sublevel_set(&model, &star, level, 200, 9).unwrap();
        assert_eq!(summary.samples.len(), 200);
        assert!(summary.max_gap_over_grad_sq.is_finite());
        assert!(summary.min_gap_over_dist_sq > 0.0);
        // The gradient vanishes only at the optimum.
        for s in &summary.samples {
            assert!(s.gap >= -1e-12);
            if s.dist_sq > 1e-10 {
                assert!(s.grad_norm_sq > 0.0);
            }
        }
    }
}
