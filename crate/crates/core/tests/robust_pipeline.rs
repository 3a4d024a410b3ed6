//! End-to-end checks of the assembled library: config-driven problem build,
//! full optimizer loop against the PDE utility, and the self-consistency
//! promises of the returned result (worst-case value, sample growth, budget
//! feasibility, exact reproducibility).

use roed::design::Design;
use roed::experiment::ExperimentConfig;
use roed::optimizer::{robust_min_utility, run, RunResult, UtilityOracle};
use roed::utility::UtilityEvaluator;

fn tiny_config() -> ExperimentConfig {
    let mut cfg: ExperimentConfig = serde_json::from_value(serde_json::json!({
        "mesh": {"nx": 8, "ny": 8},
        "sensors": {"points": [[0.5, 0.25], [0.5, 0.75]]},
        "noise": {
            "variant": "two_sensor_correlated",
            "sigma_box": [0.05, 0.15],
            "rho_box": [0.0, 0.9]
        },
        "sampling": {"n_saa": 2, "data_seed": 7},
        "optimizer": {
            "budget": 1,
            "n_ens": 8,
            "seed": 5,
            "eta": 0.05,
            "max_outer_iters": 3,
            "max_policy_iters": 30
        }
    }))
    .expect("config parses");
    cfg.map.max_gn_iters = 6; // reference points need not be fully converged
    cfg
}

fn run_once() -> (UtilityEvaluator, RunResult) {
    let bundle = tiny_config().build(None).expect("problem assembles");
    let mut evaluator = bundle.evaluator;
    let result = run(&mut evaluator, &bundle.optimizer).expect("optimization completes");
    (evaluator, result)
}

#[test]
fn budget_one_run_is_internally_consistent() {
    let (evaluator, result) = run_once();

    assert!(result.counters.total > 0, "no designs were sampled");
    assert_eq!(
        result.counters.total, result.counters.feasible,
        "a sampled design violated the budget"
    );
    assert_eq!(result.policy.len(), 2);
    assert!(result.policy.iter().all(|p| (0.0..=1.0).contains(p)));

    // hyperparameter sample: inside the box, duplicate-free, one new member
    // per outer iteration that did not stagnate
    let (lo, hi) = evaluator.theta_box();
    for t in &result.theta_samples {
        for j in 0..t.len() {
            assert!(
                (lo[j]..=hi[j]).contains(&t[j]),
                "sample component {j} = {} escapes [{}, {}]",
                t[j],
                lo[j],
                hi[j]
            );
        }
    }
    for (i, a) in result.theta_samples.iter().enumerate() {
        for b in result.theta_samples.iter().skip(i + 1) {
            assert!((a - b).norm() > 1e-10, "duplicate hyperparameter samples");
        }
    }
    let appended = result.trajectory.iter().filter(|r| !r.stagnated).count();
    assert_eq!(result.theta_samples.len(), 1 + appended);

    // the reported value is exactly the worst case over the returned sample,
    // attained at the reported hyperparameter
    let (value, arg) =
        robust_min_utility(&evaluator, &result.design_opt, &result.theta_samples).unwrap();
    assert_eq!(
        value.to_bits(),
        result.design_value.to_bits(),
        "re-evaluated worst case {value:.17e} differs from reported {:.17e}",
        result.design_value
    );
    assert_eq!(result.theta_opt, result.theta_samples[arg]);

    // with two candidates and budget one there are only two feasible designs;
    // the returned one is at least as robust as the alternative
    let other = Design::new(vec![!result.design_opt[0], !result.design_opt[1]]);
    let (other_value, _) =
        robust_min_utility(&evaluator, &other, &result.theta_samples).unwrap();
    assert!(
        result.design_value >= other_value,
        "returned {} (worst case {:.6e}) but {} achieves {:.6e}",
        result.design_opt,
        result.design_value,
        other,
        other_value
    );
}

#[test]
fn identical_configs_reproduce_the_run_exactly() {
    let (_, a) = run_once();
    let (_, b) = run_once();

    assert_eq!(a.design_opt.to_string(), b.design_opt.to_string());
    assert_eq!(a.design_value.to_bits(), b.design_value.to_bits());
    assert_eq!(a.policy, b.policy);
    assert_eq!(a.theta_samples, b.theta_samples);
    assert_eq!(a.trajectory.len(), b.trajectory.len());
    assert_eq!(a.counters, b.counters);
}
