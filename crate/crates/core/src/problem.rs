//! The multi-task problem abstraction and gradient checking.

use std::ops::Sub;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{mean, LayeredParams};
use crate::rng::{substream, Purpose};

/// Forward and backward pass counts at one instant.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassCount {
    pub forwards: u64,
    pub backwards: u64,
}

impl Sub for PassCount {
    type Output = PassCount;

    fn sub(self, rhs: PassCount) -> PassCount {
        PassCount {
            forwards: self.forwards - rhs.forwards,
            backwards: self.backwards - rhs.backwards,
        }
    }
}

impl std::ops::AddAssign for PassCount {
    fn add_assign(&mut self, rhs: PassCount) {
        self.forwards += rhs.forwards;
        self.backwards += rhs.backwards;
    }
}

/// Atomic pass counters owned by a problem.
#[derive(Debug, Default)]
pub struct PassCounters {
    forwards: AtomicU64,
    backwards: AtomicU64,
}

impl PassCounters {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record_forward(&self) {
        self.forwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn record_backward(&self) {
        self.backwards.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCount {
        PassCount {
            forwards: self.forwards.load(Ordering::Relaxed),
            backwards: self.backwards.load(Ordering::Relaxed),
        }
    }
}

/// Per-task gradients together with the gradient of the averaged loss.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub per_task: Vec<LayeredParams>,
    pub average: LayeredParams,
}

impl GradientSet {
    /// Build from per-task gradients; the average is their arithmetic mean.
    pub fn from_per_task(per_task: Vec<LayeredParams>) -> Result<Self> {
        let average = mean(&per_task)?;
        Ok(Self { per_task, average })
    }

    pub fn num_tasks(&self) -> usize {
        self.per_task.len()
    }
}

/// K losses over shared layered parameters.
///
/// Implementors provide the `eval_*` methods. Callers use the counted
/// wrappers ([`loss`](Self::loss), [`grad`](Self::grad), ...), each of which
/// records exactly one forward or backward pass before evaluating. All
/// evaluations must be deterministic functions of `theta`.
pub trait MultiTaskProblem: Sync {
    fn num_tasks(&self) -> usize;

    /// Length of every parameter layer.
    fn layer_lens(&self) -> Vec<usize>;

    /// Task that exclusively owns layer `d` (a task-specific head), or
    /// `None` for shared layers.
    fn layer_owner(&self, _d: usize) -> Option<usize> {
        None
    }

    /// Starting point for optimization.
    fn initial_params(&self) -> LayeredParams;

    fn counters(&self) -> &PassCounters;

    fn eval_loss(&self, task: usize, theta: &LayeredParams) -> f64;

    fn eval_grad(&self, task: usize, theta: &LayeredParams) -> LayeredParams;

    fn eval_losses(&self, theta: &LayeredParams) -> Vec<f64> {
        (0..self.num_tasks())
            .map(|i| self.eval_loss(i, theta))
            .collect()
    }

    /// Gradient of the averaged loss `(1/K) Σ l_i`.
    fn eval_avg_grad(&self, theta: &LayeredParams) -> LayeredParams {
        let grads: Vec<_> = (0..self.num_tasks())
            .map(|i| self.eval_grad(i, theta))
            .collect();
        mean(&grads).expect("at least one task")
    }

    /// Map an updated iterate back onto the feasible set.
    fn project(&self, _theta: &mut LayeredParams) {}

    /// Called by the optimizer before iteration `t`; problems with seeded
    /// mini-batching switch batches here.
    fn begin_iteration(&self, _t: usize) {}

    fn loss(&self, task: usize, theta: &LayeredParams) -> f64 {
        self.counters().record_forward();
        self.eval_loss(task, theta)
    }

    /// All K losses from a single forward pass.
    fn losses(&self, theta: &LayeredParams) -> Vec<f64> {
        self.counters().record_forward();
        self.eval_losses(theta)
    }

    fn grad(&self, task: usize, theta: &LayeredParams) -> LayeredParams {
        self.counters().record_backward();
        self.eval_grad(task, theta)
    }

    /// Gradient of the averaged loss from a single backward pass.
    fn avg_grad(&self, theta: &LayeredParams) -> LayeredParams {
        self.counters().record_backward();
        self.eval_avg_grad(theta)
    }

    /// Mask of shared layers (`true` where no task owns the layer).
    fn shared_mask(&self) -> Vec<bool> {
        (0..self.layer_lens().len())
            .map(|d| self.layer_owner(d).is_none())
            .collect()
    }

    /// Exact per-task gradients (K backward passes).
    fn gradient_set(&self, theta: &LayeredParams) -> Result<GradientSet> {
        let per_task = (0..self.num_tasks())
            .map(|i| {
                let g = self.grad(i, theta);
                if g.is_finite() {
                    Ok(g)
                } else {
                    Err(Error::numeric(Some(i), "gradient"))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        GradientSet::from_per_task(per_task)
    }
}

/// View of a single task of another problem as a one-task problem.
pub struct SingleTask<'a, P: ?Sized> {
    inner: &'a P,
    task: usize,
}

impl<'a, P: MultiTaskProblem + ?Sized> SingleTask<'a, P> {
    pub fn new(inner: &'a P, task: usize) -> Result<Self> {
        if task >= inner.num_tasks() {
            return Err(Error::Usage(format!(
                "task {task} out of range ({} tasks)",
                inner.num_tasks()
            )));
        }
        Ok(Self { inner, task })
    }
}

impl<P: MultiTaskProblem + ?Sized> MultiTaskProblem for SingleTask<'_, P> {
    fn num_tasks(&self) -> usize {
        1
    }

    fn layer_lens(&self) -> Vec<usize> {
        self.inner.layer_lens()
    }

    fn initial_params(&self) -> LayeredParams {
        self.inner.initial_params()
    }

    fn counters(&self) -> &PassCounters {
        self.inner.counters()
    }

    fn eval_loss(&self, _task: usize, theta: &LayeredParams) -> f64 {
        self.inner.eval_loss(self.task, theta)
    }

    fn eval_grad(&self, _task: usize, theta: &LayeredParams) -> LayeredParams {
        self.inner.eval_grad(self.task, theta)
    }

    fn project(&self, theta: &mut LayeredParams) {
        self.inner.project(theta)
    }
}

/// Worst agreement between analytic directional derivatives and central
/// differences for one task.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskGradientCheck {
    pub task: usize,
    pub max_rel_error: f64,
}

/// Absolute floor of the relative-error denominator in [`check_gradients`].
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-8;

/// Compare `g_i · u` against `(l_i(θ + h u) − l_i(θ − h u)) / 2h` over
/// `n_dirs` random unit directions `u` for every task.
///
/// The relative error is `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn check_gradients<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    theta: &LayeredParams,
    n_dirs: usize,
    h: f64,
    seed: u64,
) -> Result<Vec<TaskGradientCheck>> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let lens = theta.layer_lens();
    let mut rng = substream(seed, Purpose::GradientCheck, 0, 0);
    let dirs: Vec<LayeredParams> = (0..n_dirs)
        .map(|_| {
            let raw: Vec<f64> = (0..theta.dim()).map(|_| rng.sample(StandardNormal)).collect();
            let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
            let unit: Vec<f64> = raw.iter().map(|v| v / norm).collect();
            LayeredParams::from_flat(&lens, &unit)
        })
        .collect::<Result<_>>()?;

    (0..problem.num_tasks())
        .map(|task| {
            let g = problem.grad(task, theta);
            if !g.is_finite() {
                return Err(Error::numeric(Some(task), "gradient at check point"));
            }
            let mut worst = 0.0f64;
            for u in &dirs {
                let plus = problem.loss(task, &crate::params::axpy(h, u, theta)?);
                let minus = problem.loss(task, &crate::params::axpy(-h, u, theta)?);
                if !plus.is_finite() || !minus.is_finite() {
                    return Err(Error::numeric(Some(task), "loss at finite-difference probe"));
                }
                let analytic = g.dot(u)?;
                let numeric = (plus - minus) / (2.0 * h);
                let denom = analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
                worst = worst.max((analytic - numeric).abs() / denom);
            }
            Ok(TaskGradientCheck {
                task,
                max_rel_error: worst,
            })
        })
        .collect()
}
