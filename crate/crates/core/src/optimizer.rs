//! The multi-task training loop: perturbed task gradients, a weighting
//! method, and a (momentum) gradient step.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LayeredParams;
use crate::problem::{MultiTaskProblem, PassCount};
use crate::rng::{substream, Purpose};
use crate::sam::{samo_gradients, SamConfig, SamMode};
use crate::weighting::WeightingMethod;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    /// Full rate for the first `fraction` of the steps, half afterwards.
    HalveAt(f64),
}

/// Which layers the weighting method and update direction act on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedScope {
    /// `TrunkOnly` when the problem has task-owned layers, `All` otherwise.
    Auto,
    /// Every layer goes through the weighting method.
    All,
    /// Only shared layers are combined; each task-owned layer follows its
    /// own task's gradient.
    TrunkOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub steps: usize,
    pub schedule: Schedule,
    pub momentum: f64,
    pub seed: u64,
    /// Record every n-th iteration (the last one is always recorded).
    pub record_every: usize,
    pub shared_scope: SharedScope,
    /// Keep a parameter copy in every record.
    pub snapshots: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            steps: 1000,
            schedule: Schedule::HalveAt(0.5),
            momentum: 0.0,
            seed: 0,
            record_every: 1,
            shared_scope: SharedScope::Auto,
            snapshots: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        if let Schedule::HalveAt(f) = self.schedule {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("halve_at fraction must lie in [0, 1], got {f}")));
            }
        }
        Ok(())
    }
}

/// Learning rate at step `t`.
pub fn step_size(opt: &OptimizerConfig, t: usize) -> f64 {
    match opt.schedule {
        Schedule::Constant => opt.lr,
        Schedule::HalveAt(fraction) => {
            if (t as f64) < fraction * opt.steps as f64 {
                opt.lr
            } else {
                opt.lr / 2.0
            }
        }
    }
}

/// One recorded iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    /// Task losses at the iterate before the update.
    pub losses: Vec<f64>,
    /// Norm of the combined direction (before momentum).
    pub dir_norm: f64,
    pub lr: f64,
    /// Passes spent on the update itself (logging evaluations excluded).
    pub passes: PassCount,
    pub weights: Option<Vec<f64>>,
    pub params: Option<LayeredParams>,
    pub diagnostics: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub steps_completed: usize,
    /// Sum of update passes over all completed iterations.
    pub total_passes: PassCount,
    pub final_params: Option<LayeredParams>,
    pub final_losses: Option<Vec<f64>>,
}

/// A run aborted by a numeric failure.
#[derive(Debug, Clone, thiserror::Error)]
#[error("run aborted at iteration {iteration}: {source}")]
pub struct RunError {
    pub iteration: usize,
    pub source: Error,
    /// Last iterate that was finite.
    pub last_good: Option<LayeredParams>,
    /// Records up to the failure.
    pub partial: Trajectory,
}

impl RunError {
    fn early(source: Error) -> Self {
        Self {
            iteration: 0,
            source,
            last_good: None,
            partial: Trajectory::default(),
        }
    }
}

/// Diagnostics callback run at every recorded iteration with the iterate
/// before the update. Returned pairs are stored in the record.
pub type Hook<'a> = dyn FnMut(usize, &LayeredParams) -> Result<Vec<(String, f64)>> + 'a;

fn scope_mask<P: MultiTaskProblem + ?Sized>(problem: &P, scope: SharedScope) -> Result<Vec<bool>> {
    let shared = problem.shared_mask();
    let mask = match scope {
        SharedScope::All => vec![true; shared.len()],
        SharedScope::TrunkOnly | SharedScope::Auto => shared,
    };
    if !mask.iter().any(|&m| m) {
        return Err(Error::Config("no shared layers for the weighting method".into()));
    }
    Ok(mask)
}

/// Run `opt.steps` iterations from `problem.initial_params()`.
pub fn run<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    weighting: &dyn WeightingMethod,
    sam: &SamConfig,
    opt: &OptimizerConfig,
) -> std::result::Result<Trajectory, RunError> {
    run_from(problem, problem.initial_params(), weighting, sam, opt, &mut |_, _| Ok(Vec::new()))
}

/// Run from an explicit starting point with a diagnostics hook.
pub fn run_from<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    start: LayeredParams,
    weighting: &dyn WeightingMethod,
    sam: &SamConfig,
    opt: &OptimizerConfig,
    hook: &mut Hook<'_>,
) -> std::result::Result<Trajectory, RunError> {
    opt.validate().map_err(RunError::early)?;
    if sam.mode != SamMode::Off {
        sam.validate().map_err(RunError::early)?;
    }
    if start.layer_lens() != problem.layer_lens() {
        return Err(RunError::early(Error::Structure(
            "start point does not match the problem's layers".into(),
        )));
    }
    let owner: Vec<Option<usize>> = (0..start.num_layers()).map(|d| problem.layer_owner(d)).collect();
    let mask = scope_mask(problem, opt.shared_scope).map_err(RunError::early)?;
    let whole = mask.iter().all(|&m| m);

    let mut theta = start;
    let mut velocity = theta.zeros_like();
    let mut traj = Trajectory::default();

    for t in 0..opt.steps {
        let fail = |source: Error, theta: &LayeredParams, traj: &Trajectory| RunError {
            iteration: t,
            source,
            last_good: Some(theta.clone()),
            partial: traj.clone(),
        };
        problem.begin_iteration(t);
        let before = problem.counters().snapshot();

        let grads = if sam.mode == SamMode::Off {
            problem.gradient_set(&theta).map(|g| g.per_task)
        } else {
            samo_gradients(problem, &theta, sam, opt.seed, t as u64).map(|g| g.per_task)
        }
        .map_err(|e| fail(e, &theta, &traj))?;

        let inputs: Vec<LayeredParams> = if whole {
            grads.clone()
        } else {
            grads
                .iter()
                .map(|g| g.select_layers(&mask))
                .collect::<Result<_>>()
                .map_err(|e| fail(e, &theta, &traj))?
        };
        let mut rng = substream(opt.seed, Purpose::TaskOrder, t as u64, 0);
        let combo = weighting
            .combine(&inputs, &mut rng)
            .map_err(|e| fail(e, &theta, &traj))?;

        let mut direction = if whole {
            combo.direction.clone()
        } else {
            let mut d = theta.zeros_like();
            d.scatter_layers(&mask, &combo.direction)
                .map_err(|e| fail(e, &theta, &traj))?;
            for (layer, own) in owner.iter().enumerate() {
                if let (false, Some(task)) = (mask[layer], own) {
                    let src = grads[*task].layer(layer).map_err(|e| fail(e, &theta, &traj))?;
                    d.layer_mut(layer)
                        .map_err(|e| fail(e, &theta, &traj))?
                        .copy_from_slice(src);
                }
            }
            d
        };
        if !direction.is_finite() {
            return Err(fail(Error::numeric(None, "update direction"), &theta, &traj));
        }
        let passes = problem.counters().snapshot() - before;
        let dir_norm = direction.global_norm();

        if opt.momentum > 0.0 {
            velocity = velocity.scaled(opt.momentum);
            velocity
                .add_scaled(1.0, &direction)
                .map_err(|e| fail(e, &theta, &traj))?;
            direction = velocity.clone();
        }
        let lr = step_size(opt, t);

        if t % opt.record_every == 0 || t + 1 == opt.steps {
            let losses = problem.losses(&theta);
            let diagnostics = hook(t, &theta).map_err(|e| fail(e, &theta, &traj))?;
            traj.records.push(StepRecord {
                iteration: t,
                losses,
                dir_norm,
                lr,
                passes,
                weights: combo.weights.clone(),
                params: opt.snapshots.then(|| theta.clone()),
                diagnostics,
            });
        }

        let mut next = theta.clone();
        next.add_scaled(-lr, &direction)
            .map_err(|e| fail(e, &theta, &traj))?;
        problem.project(&mut next);
        if !next.is_finite() {
            return Err(fail(Error::numeric(None, "updated parameters"), &theta, &traj));
        }
        theta = next;
        traj.total_passes += passes;
        traj.steps_completed = t + 1;
    }

    traj.final_losses = Some(problem.losses(&theta));
    traj.final_params = Some(theta);
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{MlpConfig, MlpMultiTaskProblem, QuadraticProblem, QuadraticTask, ToyProblem};
    use crate::weighting::{Ls, Mgda, PcGrad};

    #[test]
    fn step_size_examples() {
        let c = OptimizerConfig {
            lr: 0.1,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        };
        assert!((0..50).all(|t| step_size(&c, t) == 0.1));
        let h = OptimizerConfig {
            lr: 1e-4,
            steps: 200,
            schedule: Schedule::HalveAt(0.5),
            ..OptimizerConfig::default()
        };
        assert_eq!(step_size(&h, 99), 1e-4);
        assert_eq!(step_size(&h, 100), 5e-5);
        let one = OptimizerConfig { steps: 1, ..h };
        assert_eq!(step_size(&one, 0), 1e-4);
    }

    #[test]
    fn schedule_is_positive_and_non_increasing() {
        let h = OptimizerConfig {
            lr: 0.3,
            steps: 37,
            schedule: Schedule::HalveAt(0.4),
            ..OptimizerConfig::default()
        };
        let rates: Vec<f64> = (0..37).map(|t| step_size(&h, t)).collect();
        assert!(rates.iter().all(|&r| r > 0.0));
        assert!(rates.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn gradient_descent_on_isotropic_quadratic() {
        let start = LayeredParams::new(vec![vec![1.0, -2.0], vec![0.5]]).unwrap();
        let p = QuadraticProblem::new(vec![2, 1], vec![QuadraticTask::isotropic(3)], start.clone()).unwrap();
        let opt = OptimizerConfig {
            lr: 0.1,
            steps: 100,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        };
        let traj = run(&p, &Ls, &SamConfig::off(), &opt).unwrap();
        let expected = start.scaled(0.9f64.powi(100));
        let got = traj.final_params.unwrap();
        for (a, b) in got.iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs(), "{a} vs {b}");
        }
    }

    #[test]
    fn plain_ls_matches_hand_rolled_projected_descent() {
        let p = ToyProblem::new();
        let opt = OptimizerConfig {
            lr: 0.2,
            steps: 100,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        };
        let traj = run(&p, &Ls, &SamConfig::off(), &opt).unwrap();
        let (mut x1, mut x2) = (-6.0f64, 1.0f64);
        for _ in 0..100 {
            let s = x1.powi(4) + x2.powi(4);
            let d = 1.0 + s / 10.0;
            let e = (-2.0 * (x1 + 4.0).powi(2) - 2.0 * x2 * x2).exp();
            let g1 = 0.5 * (0.4 * x1.powi(3) / (d * d) + 4.0 * (x1 + 4.0) * e);
            let g2 = 0.5 * (0.4 * x2.powi(3) / (d * d) + 4.0 * x2 * e);
            x1 = (x1 - 0.2 * g1).clamp(-6.0, 6.0);
            x2 = (x2 - 0.2 * g2).clamp(-3.0, 3.0);
        }
        let f = traj.final_params.unwrap().to_flat();
        assert!((f[0] - x1).abs() <= 1e-12 && (f[1] - x2).abs() <= 1e-12, "{f:?} vs ({x1}, {x2})");
    }

    #[test]
    fn records_and_pass_ledger() {
        let p = MlpMultiTaskProblem::new(MlpConfig::default()).unwrap();
        let k = 3u64;
        let cases = [
            (SamConfig::off(), (0, k)),
            (SamConfig::global(0.01), (0, k + 1)),
            (SamConfig::default(), (2 * k, k + 1)),
            (
                SamConfig {
                    mode: SamMode::Local,
                    estimator: crate::sam::Estimator::Exact,
                    ..SamConfig::default()
                },
                (0, 2 * k),
            ),
        ];
        for (sam, (fwd, bwd)) in cases {
            let opt = OptimizerConfig {
                lr: 0.01,
                steps: 7,
                record_every: 3,
                ..OptimizerConfig::default()
            };
            let traj = run(&p, &Ls, &sam, &opt).unwrap();
            let iters: Vec<usize> = traj.records.iter().map(|r| r.iteration).collect();
            assert_eq!(iters, vec![0, 3, 6]);
            for r in &traj.records {
                assert_eq!((r.passes.forwards, r.passes.backwards), (fwd, bwd), "{:?}", sam.mode);
                assert_eq!(r.losses.len(), 3);
            }
            assert_eq!(traj.total_passes.forwards, 7 * fwd);
            assert_eq!(traj.total_passes.backwards, 7 * bwd);
        }
    }

    #[test]
    fn heads_follow_their_own_gradient() {
        let p = MlpMultiTaskProblem::new(MlpConfig::default()).unwrap();
        let theta = p.initial_params();
        let opt = OptimizerConfig {
            lr: 0.05,
            steps: 1,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        };
        let traj = run(&p, &Mgda::default(), &SamConfig::off(), &opt).unwrap();
        let next = traj.final_params.unwrap();
        for k in 0..3 {
            let layer = 2 + k;
            let g = p.eval_grad(k, &theta);
            let expect: Vec<f64> = theta
                .layer(layer)
                .unwrap()
                .iter()
                .zip(g.layer(layer).unwrap())
                .map(|(a, b)| a - 0.05 * b)
                .collect();
            assert_eq!(next.layer(layer).unwrap(), expect.as_slice());
        }
    }

    #[test]
    fn runs_are_deterministic_across_parallelism() {
        let p = MlpMultiTaskProblem::new(MlpConfig::default()).unwrap();
        let opt = OptimizerConfig {
            lr: 0.02,
            steps: 20,
            ..OptimizerConfig::default()
        };
        let seq = SamConfig {
            rho: 0.05,
            ..SamConfig::default()
        };
        let par = SamConfig {
            parallel: true,
            ..seq.clone()
        };
        let a = run(&p, &PcGrad, &seq, &opt).unwrap();
        let b = run(&p, &PcGrad, &par, &opt).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.final_params, b.final_params);
    }

    #[test]
    fn divergence_reports_iteration_and_last_good() {
        let start = LayeredParams::new(vec![vec![1.0]]).unwrap();
        let p = QuadraticProblem::new(vec![1], vec![QuadraticTask::diagonal(&[1e200])], start).unwrap();
        let opt = OptimizerConfig {
            lr: 1e200,
            steps: 10,
            schedule: Schedule::Constant,
            ..OptimizerConfig::default()
        };
        let err = run(&p, &Ls, &SamConfig::off(), &opt).unwrap_err();
        assert!(matches!(err.source, Error::Numeric { .. }));
        assert!(err.last_good.unwrap().is_finite());
        assert_eq!(err.partial.steps_completed, err.iteration);
    }

    #[test]
    fn rejects_bad_config() {
        let p = ToyProblem::new();
        let bad = OptimizerConfig {
            momentum: 1.0,
            ..OptimizerConfig::default()
        };
        assert!(matches!(
            run(&p, &Ls, &SamConfig::off(), &bad).unwrap_err().source,
            Error::Config(_)
        ));
    }
}
