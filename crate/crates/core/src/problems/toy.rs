//! Two-objective synthetic landscape on a box.
//!
//! ```text
//! f1 = 1 − 1 / (1 + (x1⁴ + x2⁴) / 10)
//! f2 = 1 − exp(−2 (x1 + 4)² − 2 x2²)
//! ```
//!
//! with `x1 ∈ [−6, 6]`, `x2 ∈ [−3, 3]`. `f1` has a wide quartic bowl at the
//! origin and `f2` a narrow Gaussian well at `(−4, 0)`.

use serde::{Deserialize, Serialize};

use crate::params::LayeredParams;
use crate::problem::{GradientSet, MultiTaskProblem, PassCounters};

pub const X1_RANGE: (f64, f64) = (-6.0, 6.0);
pub const X2_RANGE: (f64, f64) = (-3.0, 3.0);

/// Default starting point of the landscape trajectories.
pub const TOY_START: [f64; 2] = [-6.0, 1.0];

fn raw_losses(x1: f64, x2: f64) -> (f64, f64) {
    let f1 = 1.0 - 1.0 / (1.0 + 0.1 * (x1.powi(4) + x2.powi(4)));
    let f2 = 0.0 - (-2.0 * (x1 + 4.0).powi(2) - 2.0 * x2 * x2).exp_m1();
    (f1, f2)
}

fn raw_grads(x1: f64, x2: f64) -> ([f64; 2], [f64; 2]) {
    let denom = 1.0 + 0.1 * (x1.powi(4) + x2.powi(4));
    let inv_sq = 1.0 / (denom * denom);
    let g1 = [0.4 * x1.powi(3) * inv_sq, 0.4 * x2.powi(3) * inv_sq];
    let e = (-2.0 * (x1 + 4.0).powi(2) - 2.0 * x2 * x2).exp();
    let g2 = [4.0 * (x1 + 4.0) * e, 4.0 * x2 * e];
    (g1, g2)
}

fn clamp_to_box(x1: f64, x2: f64) -> (f64, f64) {
    let c1 = x1.clamp(X1_RANGE.0, X1_RANGE.1);
    let c2 = x2.clamp(X2_RANGE.0, X2_RANGE.1);
    if c1 != x1 || c2 != x2 {
        log::warn!("toy point ({x1}, {x2}) outside the box; clamped to ({c1}, {c2})");
    }
    (c1, c2)
}

/// Both objectives at a point of the box. Points outside are clamped.
pub fn toy_losses(x1: f64, x2: f64) -> (f64, f64) {
    let (x1, x2) = clamp_to_box(x1, x2);
    raw_losses(x1, x2)
}

/// Analytic gradients of both objectives. Points outside are clamped.
pub fn toy_grads(x1: f64, x2: f64) -> GradientSet {
    let (x1, x2) = clamp_to_box(x1, x2);
    let (g1, g2) = raw_grads(x1, x2);
    GradientSet::from_per_task(vec![
        LayeredParams::new(vec![g1.to_vec()]).expect("finite on the box"),
        LayeredParams::new(vec![g2.to_vec()]).expect("finite on the box"),
    ])
    .expect("two tasks")
}

/// One node of the landscape grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x1: f64,
    pub x2: f64,
    pub f1: f64,
    pub f2: f64,
}

/// Evaluate both objectives on an `nx × ny` grid spanning the box.
///
/// Rows are emitted in row-major order: `x2` is the slow (row) index and
/// `x1` the fast one.
pub fn toy_grid(nx: usize, ny: usize) -> Vec<GridPoint> {
    assert!(nx >= 2 && ny >= 2, "grid needs at least two nodes per axis");
    let node = |lo: f64, hi: f64, i: usize, n: usize| lo + (hi - lo) * i as f64 / (n - 1) as f64;
    let mut out = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        let x2 = node(X2_RANGE.0, X2_RANGE.1, j, ny);
        for i in 0..nx {
            let x1 = node(X1_RANGE.0, X1_RANGE.1, i, nx);
            let (f1, f2) = raw_losses(x1, x2);
            out.push(GridPoint { x1, x2, f1, f2 });
        }
    }
    out
}

/// Square landscape grid with `resolution` nodes per axis.
pub fn toy_pareto_grid(resolution: usize) -> Vec<GridPoint> {
    toy_grid(resolution, resolution)
}

/// The landscape as a two-task problem over a single two-entry layer.
///
/// Evaluation uses the formulas directly, so temporarily perturbed points
/// outside the box are fine. Updated iterates are clamped back by
/// [`project`](MultiTaskProblem::project).
#[derive(Debug, Default)]
pub struct ToyProblem {
    start: [f64; 2],
    counters: PassCounters,
}

impl ToyProblem {
    pub fn new() -> Self {
        Self::with_start(TOY_START)
    }

    pub fn with_start(start: [f64; 2]) -> Self {
        Self {
            start,
            counters: PassCounters::new(),
        }
    }

    pub fn point(x1: f64, x2: f64) -> LayeredParams {
        LayeredParams::new(vec![vec![x1, x2]]).expect("finite point")
    }
}

fn coords(theta: &LayeredParams) -> (f64, f64) {
    let l = &theta.layers()[0];
    (l[0], l[1])
}

impl MultiTaskProblem for ToyProblem {
    fn num_tasks(&self) -> usize {
        2
    }

    fn layer_lens(&self) -> Vec<usize> {
        vec![2]
    }

    fn initial_params(&self) -> LayeredParams {
        Self::point(self.start[0], self.start[1])
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }

    fn eval_loss(&self, task: usize, theta: &LayeredParams) -> f64 {
        let (x1, x2) = coords(theta);
        let (f1, f2) = raw_losses(x1, x2);
        if task == 0 {
            f1
        } else {
            f2
        }
    }

    fn eval_losses(&self, theta: &LayeredParams) -> Vec<f64> {
        let (x1, x2) = coords(theta);
        let (f1, f2) = raw_losses(x1, x2);
        vec![f1, f2]
    }

    fn eval_grad(&self, task: usize, theta: &LayeredParams) -> LayeredParams {
        let (x1, x2) = coords(theta);
        let (g1, g2) = raw_grads(x1, x2);
        let g = if task == 0 { g1 } else { g2 };
        let mut out = theta.zeros_like();
        out.layer_mut(0).expect("one layer").copy_from_slice(&g);
        out
    }

    fn project(&self, theta: &mut LayeredParams) {
        let l = theta.layer_mut(0).expect("one layer");
        l[0] = l[0].clamp(X1_RANGE.0, X1_RANGE.1);
        l[1] = l[1].clamp(X2_RANGE.0, X2_RANGE.1);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::check_gradients;

    #[test]
    fn loss_examples() {
        assert_eq!(toy_losses(0.0, 0.0).0, 0.0);
        let (f1, f2) = toy_losses(-4.0, 0.0);
        assert_eq!(f2, 0.0);
        // 1 − 1/(1 + 256/10)
        assert!((f1 - (1.0 - 1.0 / 26.6)).abs() < 1e-15);
        assert!((f1 - 0.962_406).abs() < 1e-6);
    }

    #[test]
    fn gradient_examples() {
        let at_origin = toy_grads(0.0, 0.0);
        assert_eq!(at_origin.per_task[0].to_flat(), vec![0.0, 0.0]);
        let at_well = toy_grads(-4.0, 0.0);
        assert_eq!(at_well.per_task[1].to_flat(), vec![0.0, 0.0]);
        let expected = (0.4 * (-64.0)) / (26.6f64 * 26.6);
        assert!((at_well.per_task[0].to_flat()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences_at_start() {
        let (x1, x2) = (-6.0, 1.0);
        let h = 1e-5;
        let g = toy_grads(x1, x2);
        for (task, grad) in g.per_task.iter().enumerate() {
            let f = |a: f64, b: f64| {
                let (f1, f2) = raw_losses(a, b);
                if task == 0 {
                    f1
                } else {
                    f2
                }
            };
            let d1 = (f(x1 + h, x2) - f(x1 - h, x2)) / (2.0 * h);
            let d2 = (f(x1, x2 + h) - f(x1, x2 - h)) / (2.0 * h);
            let an = grad.to_flat();
            assert!((an[0] - d1).abs() <= 1e-6 * an[0].abs().max(1e-8), "{task}: {} vs {d1}", an[0]);
            assert!((an[1] - d2).abs() <= 1e-6 * an[1].abs().max(1e-8), "{task}: {} vs {d2}", an[1]);
        }
        let p = ToyProblem::new();
        let report = check_gradients(&p, &ToyProblem::point(-6.0, 1.0), 20, 1e-5, 3).unwrap();
        assert!(report.iter().all(|r| r.max_rel_error <= 1e-5), "{report:?}");
    }

    #[test]
    fn grid_examples() {
        let corners = toy_pareto_grid(2);
        assert_eq!(corners.len(), 4);
        assert_eq!((corners[0].x1, corners[0].x2), (-6.0, -3.0));
        assert_eq!((corners[1].x1, corners[1].x2), (6.0, -3.0));
        assert_eq!((corners[3].x1, corners[3].x2), (6.0, 3.0));

        let grid = toy_pareto_grid(7);
        let well = grid
            .iter()
            .find(|p| p.x1 == -4.0 && p.x2 == 0.0)
            .expect("(-4, 0) is a node at resolution 7");
        assert_eq!(well.f2, 0.0);

        // far from the well exp(q) drops below half an ulp of 1 and f2 rounds to 1.0
        let in_range = |f: f64, complement: f64| {
            (0.0..1.0).contains(&f) || (f == 1.0 && complement < f64::EPSILON)
        };
        for p in toy_pareto_grid(101) {
            let e2 = (-2.0 * (p.x1 + 4.0).powi(2) - 2.0 * p.x2 * p.x2).exp();
            assert!(in_range(p.f1, 1.0 - p.f1) && in_range(p.f2, e2), "{p:?}");
        }
    }

    #[test]
    fn only_the_origin_is_stationary_for_f1() {
        let grid = toy_grid(601, 301);
        for p in grid {
            let interior = p.x1 > X1_RANGE.0 && p.x1 < X1_RANGE.1 && p.x2 > X2_RANGE.0 && p.x2 < X2_RANGE.1;
            if !interior || (p.x1 == 0.0 && p.x2 == 0.0) {
                continue;
            }
            let (g1, _) = raw_grads(p.x1, p.x2);
            let n = (g1[0] * g1[0] + g1[1] * g1[1]).sqrt();
            assert!(n >= 1e-8, "spurious stationary point at ({}, {})", p.x1, p.x2);
        }
    }

    #[test]
    fn projection_clamps_and_loss_is_total_outside() {
        let p = ToyProblem::new();
        let mut theta = ToyProblem::point(-9.0, 4.0);
        assert!(p.eval_loss(0, &theta).is_finite());
        p.project(&mut theta);
        assert_eq!(theta.to_flat(), vec![-6.0, 3.0]);
        assert_eq!(toy_losses(-9.0, 4.0), toy_losses(-6.0, 3.0));
    }
}
