//! Gradient-manipulation methods: map K task gradients to one update
//! direction.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::params::{mean, LayeredParams};
use crate::rng::StreamRng;

/// Output of a weighting method.
#[derive(Debug, Clone, PartialEq)]
pub struct Combination {
    pub direction: LayeredParams,
    /// Task weights with `direction = Σ w_i g_i`, when the method has them.
    pub weights: Option<Vec<f64>>,
    /// Set when an iterative solver stopped before reaching its tolerance.
    pub approximate: bool,
}

/// A method `M` combining task gradients into a single direction.
///
/// Implementations must return a direction with the layer structure of the
/// inputs. Other solvers (Nash-MTL, FairGrad, ...) plug in here.
pub trait WeightingMethod: Send + Sync {
    fn name(&self) -> &str;

    /// `rng` is the iteration-indexed stream for methods that randomize.
    fn combine(&self, gradients: &[LayeredParams], rng: &mut StreamRng) -> Result<Combination>;
}

fn check_inputs(gradients: &[LayeredParams], min_tasks: usize) -> Result<()> {
    if gradients.len() < min_tasks {
        return Err(Error::Usage(format!(
            "need at least {min_tasks} gradients, got {}",
            gradients.len()
        )));
    }
    for g in &gradients[1..] {
        gradients[0].check_structure(g)?;
    }
    if let Some(i) = gradients.iter().position(|g| !g.is_finite()) {
        return Err(Error::numeric(Some(i), "gradient passed to weighting method"));
    }
    Ok(())
}

/// Linear scalarization: the mean of the task gradients.
pub fn ls_combine(gradients: &[LayeredParams]) -> Result<Combination> {
    check_inputs(gradients, 1)?;
    let k = gradients.len();
    Ok(Combination {
        direction: mean(gradients)?,
        weights: Some(vec![1.0 / k as f64; k]),
        approximate: false,
    })
}

/// Min-norm element of the convex hull of the inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct MinNormSolution {
    pub weights: Vec<f64>,
    pub direction: LayeredParams,
    /// Frank-Wolfe duality gap `wᵀMw − min_t (Mw)_t` at the returned weights.
    pub gap: f64,
    pub iterations: usize,
    pub approximate: bool,
    /// `‖direction‖ ≤ tol`: some convex combination of the gradients
    /// vanishes.
    pub pareto_stationary: bool,
}

/// Closed-form min-norm weight on `g1` for two gradients:
/// `γ = clip(((g2 − g1)·g2) / ‖g1 − g2‖², 0, 1)`.
pub fn two_task_min_norm(g1: &LayeredParams, g2: &LayeredParams) -> Result<f64> {
    let diff = g2.sub(g1)?;
    let denom = diff.dot(&diff)?;
    if denom <= f64::MIN_POSITIVE {
        return Ok(0.5);
    }
    Ok((diff.dot(g2)? / denom).clamp(0.0, 1.0))
}

fn gram(gradients: &[LayeredParams]) -> Result<Vec<Vec<f64>>> {
    let k = gradients.len();
    let mut m = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in i..k {
            let v = gradients[i].dot(&gradients[j])?;
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    Ok(m)
}

fn combine_weighted(gradients: &[LayeredParams], weights: &[f64]) -> Result<LayeredParams> {
    let mut out = gradients[0].zeros_like();
    for (g, &w) in gradients.iter().zip(weights) {
        out.add_scaled(w, g)?;
    }
    Ok(out)
}

/// Away-step Frank-Wolfe on the probability simplex for `min_w ‖Σ w_i g_i‖²`,
/// with exact line search. Two gradients use the closed form.
///
/// Stops when the duality gap drops to `tol` or after `max_iters` steps, in
/// which case the result is flagged approximate.
pub fn mgda_combine(gradients: &[LayeredParams], max_iters: usize, tol: f64) -> Result<MinNormSolution> {
    check_inputs(gradients, 1)?;
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance must be positive, got {tol}")));
    }
    let k = gradients.len();
    let m = gram(gradients)?;
    let mw = |w: &[f64]| -> Vec<f64> {
        (0..k)
            .map(|i| (0..k).map(|j| m[i][j] * w[j]).sum())
            .collect()
    };
    let gap_of = |w: &[f64]| -> f64 {
        let g = mw(w);
        let quad: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
        let min = g.iter().copied().fold(f64::INFINITY, f64::min);
        (quad - min).max(0.0)
    };

    let (weights, iterations, approximate) = if k == 1 {
        (vec![1.0], 0, false)
    } else if k == 2 {
        let gamma = two_task_min_norm(&gradients[0], &gradients[1])?;
        (vec![gamma, 1.0 - gamma], 0, false)
    } else {
        let mut w = vec![1.0 / k as f64; k];
        let mut converged = false;
        let mut it = 0;
        while it < max_iters {
            let g = mw(&w);
            let quad: f64 = w.iter().zip(&g).map(|(a, b)| a * b).sum();
            let (t, &g_fw) = g
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("k >= 3");
            let fw_gap = quad - g_fw;
            if fw_gap <= tol {
                converged = true;
                break;
            }
            let (a, &g_away) = g
                .iter()
                .enumerate()
                .filter(|(i, _)| w[*i] > 0.0)
                .max_by(|a, b| a.1.total_cmp(b.1))
                .expect("weights sum to one");
            let away_gap = g_away - quad;

            // toward e_t, or away from e_a when that promises more decrease
            let (dir, gamma_max): (Vec<f64>, f64) = if fw_gap >= away_gap {
                let d = (0..k).map(|i| f64::from(u8::from(i == t)) - w[i]).collect();
                (d, 1.0)
            } else {
                let d = (0..k).map(|i| w[i] - f64::from(u8::from(i == a))).collect();
                (d, w[a] / (1.0 - w[a]))
            };
            let md = mw(&dir);
            let curvature: f64 = dir.iter().zip(&md).map(|(x, y)| x * y).sum();
            let slope: f64 = dir.iter().zip(&g).map(|(x, y)| x * y).sum();
            if curvature <= 0.0 || slope >= 0.0 {
                converged = true;
                break;
            }
            let gamma = (-slope / curvature).min(gamma_max);
            for (wi, di) in w.iter_mut().zip(&dir) {
                *wi = (*wi + gamma * di).max(0.0);
            }
            if gamma == gamma_max && fw_gap < away_gap {
                w[a] = 0.0;
            }
            let total: f64 = w.iter().sum();
            w.iter_mut().for_each(|wi| *wi /= total);
            it += 1;
        }
        let best = w;
        (best, it, !converged)
    };

    let direction = combine_weighted(gradients, &weights)?;
    let gap = gap_of(&weights);
    let pareto_stationary = direction.global_norm() <= tol;
    Ok(MinNormSolution {
        weights,
        direction,
        gap,
        iterations,
        approximate,
        pareto_stationary,
    })
}

/// Project conflicting gradients onto each other's normal planes, then
/// average. For each task the other tasks are visited in an order shuffled
/// by `rng`; pairs whose `g_j` has zero norm are skipped.
pub fn pcgrad_combine(gradients: &[LayeredParams], rng: &mut StreamRng) -> Result<Combination> {
    check_inputs(gradients, 2)?;
    let k = gradients.len();
    let mut projected = Vec::with_capacity(k);
    for i in 0..k {
        let mut gi = gradients[i].clone();
        let mut order: Vec<usize> = (0..k).filter(|&j| j != i).collect();
        order.shuffle(rng);
        for j in order {
            let gj = &gradients[j];
            let norm_sq = gj.dot(gj)?;
            if norm_sq < 1e-24 {
                continue;
            }
            let dot = gi.dot(gj)?;
            if dot < 0.0 {
                gi.add_scaled(-dot / norm_sq, gj)?;
            }
        }
        projected.push(gi);
    }
    Ok(Combination {
        direction: mean(&projected)?,
        weights: None,
        approximate: false,
    })
}

/// Linear scalarization.
#[derive(Debug, Clone, Copy, Default)]
pub struct Ls;

impl WeightingMethod for Ls {
    fn name(&self) -> &str {
        "ls"
    }

    fn combine(&self, gradients: &[LayeredParams], _rng: &mut StreamRng) -> Result<Combination> {
        ls_combine(gradients)
    }
}

/// Multiple-gradient descent via the min-norm element.
#[derive(Debug, Clone, Copy)]
pub struct Mgda {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for Mgda {
    fn default() -> Self {
        Self {
            max_iters: 250,
            tol: 1e-7,
        }
    }
}

impl WeightingMethod for Mgda {
    fn name(&self) -> &str {
        "mgda"
    }

    fn combine(&self, gradients: &[LayeredParams], _rng: &mut StreamRng) -> Result<Combination> {
        let sol = mgda_combine(gradients, self.max_iters, self.tol)?;
        if sol.approximate {
            log::debug!("min-norm solver stopped with gap {:.3e}", sol.gap);
        }
        Ok(Combination {
            direction: sol.direction,
            weights: Some(sol.weights),
            approximate: sol.approximate,
        })
    }
}

/// Gradient surgery by pairwise projection.
#[derive(Debug, Clone, Copy, Default)]
pub struct PcGrad;

impl WeightingMethod for PcGrad {
    fn name(&self) -> &str {
        "pcgrad"
    }

    fn combine(&self, gradients: &[LayeredParams], rng: &mut StreamRng) -> Result<Combination> {
        pcgrad_combine(gradients, rng)
    }
}

/// Look up a built-in method by name (`ls`, `mgda`, `pcgrad`).
pub fn by_name(name: &str) -> Result<Box<dyn WeightingMethod>> {
    match name {
        "ls" => Ok(Box::new(Ls)),
        "mgda" => Ok(Box::new(Mgda::default())),
        "pcgrad" => Ok(Box::new(PcGrad)),
        other => Err(Error::Config(format!(
            "unknown weighting method '{other}' (expected ls, mgda or pcgrad)"
        ))),
    }
}
