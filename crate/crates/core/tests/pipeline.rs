//! End-to-end checks across problems, perturbations, weighting and the
//! optimizer loop.

use samo_core::optimizer::{run, OptimizerConfig, Schedule};
use samo_core::problems::{MlpConfig, MlpMultiTaskProblem, QuadraticProblem, QuadraticTask, ToyProblem};
use samo_core::sam::{Estimator, SamConfig, SamMode};
use samo_core::weighting::{by_name, Ls};
use samo_core::{LayeredParams, MultiTaskProblem, PassCount};

fn mlp(tasks: usize) -> MlpMultiTaskProblem {
    MlpMultiTaskProblem::new(MlpConfig {
        seed: 1,
        tasks,
        n_samples: 48,
        ..MlpConfig::default()
    })
    .unwrap()
}

fn steps(t: usize) -> OptimizerConfig {
    OptimizerConfig {
        lr: 0.01,
        steps: t,
        record_every: 1,
        ..OptimizerConfig::default()
    }
}

fn mode(mode: SamMode, estimator: Estimator) -> SamConfig {
    SamConfig {
        mode,
        estimator,
        ..SamConfig::default()
    }
}

#[test]
fn pass_totals_follow_the_per_iteration_ledger() {
    let k = 3u64;
    let t = 7;
    let p = mlp(k as usize);
    let cases = [
        (SamConfig::off(), 0, k),
        (SamConfig::global(0.01), 0, k + 1),
        (mode(SamMode::Joint, Estimator::Spsa), 2 * k, k + 1),
        (mode(SamMode::Local, Estimator::Exact), 0, 2 * k),
        (mode(SamMode::Joint, Estimator::Exact), 0, 2 * k + 1),
    ];
    for (sam, fwd, bwd) in cases {
        let traj = run(&p, &Ls, &sam, &steps(t)).unwrap();
        let per = PassCount {
            forwards: fwd,
            backwards: bwd,
        };
        assert!(traj.records.iter().all(|r| r.passes == per), "{:?}", sam.mode);
        assert_eq!(
            traj.total_passes,
            PassCount {
                forwards: fwd * t as u64,
                backwards: bwd * t as u64,
            },
            "{:?}",
            sam.mode
        );
    }
}

#[test]
fn every_weighting_and_mode_descends_on_the_network() {
    let p = mlp(3);
    let opt = OptimizerConfig {
        lr: 0.05,
        steps: 200,
        record_every: 200,
        ..OptimizerConfig::default()
    };
    let start: f64 = p.eval_losses(&p.initial_params()).iter().sum();
    for w in ["ls", "mgda", "pcgrad"] {
        let weighting = by_name(w).unwrap();
        for sam in [SamConfig::off(), SamConfig::global(0.01), SamConfig::default()] {
            let traj = run(&p, weighting.as_ref(), &sam, &opt).unwrap();
            let end: f64 = traj.final_losses.unwrap().iter().sum();
            assert!(end < start, "{w} {:?}: {end} !< {start}", sam.mode);
        }
    }
}

#[test]
fn gradient_descent_reaches_the_quadratic_minimum() {
    let p = QuadraticProblem::single_layer(vec![
        QuadraticTask::diagonal(&[2.0, 1.0, 0.5]),
        QuadraticTask::diagonal(&[1.0, 1.0, 1.0]),
    ])
    .unwrap()
    .with_start(LayeredParams::new(vec![vec![3.0, -2.0, 1.0]]).unwrap())
    .unwrap();
    let opt = OptimizerConfig {
        lr: 0.5,
        steps: 400,
        schedule: Schedule::Constant,
        record_every: 400,
        ..OptimizerConfig::default()
    };
    let traj = run(&p, &Ls, &SamConfig::off(), &opt).unwrap();
    let x = traj.final_params.unwrap();
    assert!(x.global_norm() < 1e-10, "{}", x.global_norm());
}

#[test]
fn toy_runs_stay_finite_and_record_the_start() {
    let toy = ToyProblem::new();
    let opt = OptimizerConfig {
        lr: 0.5,
        steps: 50,
        momentum: 0.9,
        snapshots: true,
        ..OptimizerConfig::default()
    };
    let traj = run(&toy, &Ls, &SamConfig::global(0.5), &opt).unwrap();
    assert_eq!(traj.records[0].params.as_ref().unwrap().to_flat(), vec![-6.0, 1.0]);
    assert!(traj.final_params.unwrap().is_finite());
    assert_eq!(traj.steps_completed, 50);
}

#[test]
fn a_diverging_run_reports_its_last_finite_iterate() {
    // a concave quadratic pushes the iterate to infinity
    let p = QuadraticProblem::single_layer(vec![QuadraticTask::diagonal(&[-4.0, -4.0])])
        .unwrap()
        .with_start(LayeredParams::new(vec![vec![1.0, 1.0]]).unwrap())
        .unwrap();
    let opt = OptimizerConfig {
        lr: 1.0,
        steps: 2000,
        schedule: Schedule::Constant,
        ..OptimizerConfig::default()
    };
    let err = run(&p, &Ls, &SamConfig::off(), &opt).unwrap_err();
    assert!(err.iteration > 0);
    assert!(err.last_good.unwrap().is_finite());
    assert_eq!(err.partial.steps_completed, err.iteration);
}
