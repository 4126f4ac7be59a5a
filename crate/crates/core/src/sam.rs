//! Sharpness-aware perturbations for multi-task training.
//!
//! Three perturbation sources are supported:
//!
//! * **global**: one shared perturbation `ρ ∇l₀ / ‖∇l₀‖` from the averaged
//!   loss `l₀ = (1/K) Σ lᵢ`;
//! * **local**: a per-task perturbation `ρ ∇lᵢ / ‖∇lᵢ‖`;
//! * **joint**: `ε̂ᵢ = ρ v / ‖v‖` with `v = α ∇l₀ + (1 − α) ∇̂lᵢ`, where the
//!   local term `∇̂lᵢ` is either the exact task gradient or a forward-only
//!   SPSA estimate rescaled to the magnitude of `∇l₀`.
//!
//! The task gradient is then taken at the perturbed point `θ + ε̂ᵢ`
//! (first-order SAM: the Jacobian of the perturbation is dropped).

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{axpy, LayeredParams};
use crate::problem::MultiTaskProblem;
use crate::rng::{substream, Purpose, StreamRng};

/// Norms below this are treated as zero wherever a norm divides.
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Source of the local gradient in the joint perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    Spsa,
}

/// How an SPSA estimate is rescaled against the averaged-loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    Layerwise,
    Global,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamMode {
    /// Plain multi-task gradients, no perturbation.
    Off,
    /// Shared perturbation from the averaged loss.
    Global,
    /// Per-task perturbation from each task's own gradient.
    Local,
    /// Joint global-local perturbation.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamConfig {
    pub mode: SamMode,
    /// Perturbation radius.
    pub rho: f64,
    /// Weight of the global term in the joint perturbation.
    pub alpha: f64,
    /// SPSA probe step.
    pub mu: f64,
    pub estimator: Estimator,
    pub normalization: Normalization,
    /// SPSA estimates averaged per task and iteration.
    pub spsa_samples: usize,
    /// Evaluate the K task branches on the rayon pool.
    pub parallel: bool,
}

impl Default for SamConfig {
    fn default() -> Self {
        Self {
            mode: SamMode::Joint,
            rho: 0.001,
            alpha: 0.5,
            mu: 0.01,
            estimator: Estimator::Spsa,
            normalization: Normalization::Layerwise,
            spsa_samples: 1,
            parallel: false,
        }
    }
}

impl SamConfig {
    pub fn off() -> Self {
        Self {
            mode: SamMode::Off,
            ..Self::default()
        }
    }

    pub fn global(rho: f64) -> Self {
        Self {
            mode: SamMode::Global,
            rho,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::Config(format!("rho must be positive, got {}", self.rho)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("mu must be positive, got {}", self.mu)));
        }
        if self.spsa_samples == 0 {
            return Err(Error::Config("spsa_samples must be at least 1".into()));
        }
        Ok(())
    }
}

/// A perturbation (or rescaled estimate) and whether its source norm was
/// below [`DEGENERATE_NORM`], in which case `vector` is all zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub vector: LayeredParams,
    pub degenerate: bool,
}

/// `ρ g / ‖g‖`, or zero when `‖g‖ < 1e-12`.
pub fn sam_perturbation(g: &LayeredParams, rho: f64) -> Result<Perturbation> {
    if !g.is_finite() {
        return Err(Error::numeric(None, "gradient used for perturbation"));
    }
    let norm = g.global_norm();
    if norm < DEGENERATE_NORM {
        return Ok(Perturbation {
            vector: g.zeros_like(),
            degenerate: true,
        });
    }
    Ok(Perturbation {
        vector: g.scaled(rho / norm),
        degenerate: false,
    })
}

/// `ρ v / ‖v‖` with `v = α g0 + (1 − α) gi_hat`.
///
/// At `α = 1` and `α = 0` the unused term is not touched, so the result is
/// bit-identical to [`sam_perturbation`] of the remaining term.
pub fn joint_perturbation(
    g0: &LayeredParams,
    gi_hat: &LayeredParams,
    rho: f64,
    alpha: f64,
) -> Result<Perturbation> {
    g0.check_structure(gi_hat)?;
    if alpha == 1.0 {
        return sam_perturbation(g0, rho);
    }
    if alpha == 0.0 {
        return sam_perturbation(gi_hat, rho);
    }
    let v = axpy(alpha, g0, &gi_hat.scaled(1.0 - alpha))?;
    sam_perturbation(&v, rho)
}

/// Forward-only gradient estimate
/// `((lᵢ(θ + μz) − lᵢ(θ − μz)) / 2μ) z` with `z ~ N(0, I_m)`, averaged
/// over `samples` draws. Costs `2 · samples` forward passes.
pub fn spsa_estimate<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    task: usize,
    theta: &LayeredParams,
    mu: f64,
    samples: usize,
    rng: &mut StreamRng,
) -> Result<LayeredParams> {
    if !(mu > 0.0) {
        return Err(Error::Config(format!("mu must be positive, got {mu}")));
    }
    let lens = theta.layer_lens();
    let mut acc = theta.zeros_like();
    for _ in 0..samples.max(1) {
        let flat: Vec<f64> = (0..theta.dim()).map(|_| rng.sample(StandardNormal)).collect();
        let z = LayeredParams::from_flat(&lens, &flat)?;
        let plus = problem.loss(task, &axpy(mu, &z, theta)?);
        let minus = problem.loss(task, &axpy(-mu, &z, theta)?);
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(Some(task), "loss at SPSA probe"));
        }
        acc.add_scaled((plus - minus) / (2.0 * mu), &z)?;
    }
    Ok(acc.scaled(1.0 / samples.max(1) as f64))
}

/// Rescale every layer of `estimate` to the norm of the same layer of
/// `reference`. Layers of `estimate` with norm below 1e-12 become zeros.
pub fn layerwise_normalize(estimate: &LayeredParams, reference: &LayeredParams) -> Result<LayeredParams> {
    estimate.check_structure(reference)?;
    let mut out = estimate.clone();
    for (d, ref_norm) in reference.layer_norms().into_iter().enumerate() {
        let block = out.layer_mut(d)?;
        let est_norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if est_norm < DEGENERATE_NORM {
            0.0
        } else {
            ref_norm / est_norm
        };
        block.iter_mut().for_each(|v| *v *= scale);
    }
    Ok(out)
}

/// Rescale all of `estimate` by one factor `‖reference‖ / ‖estimate‖`.
pub fn global_normalize(estimate: &LayeredParams, reference: &LayeredParams) -> Result<Perturbation> {
    estimate.check_structure(reference)?;
    let est_norm = estimate.global_norm();
    if est_norm < DEGENERATE_NORM {
        return Ok(Perturbation {
            vector: estimate.zeros_like(),
            degenerate: true,
        });
    }
    Ok(Perturbation {
        vector: estimate.scaled(reference.global_norm() / est_norm),
        degenerate: false,
    })
}

/// Per-task gradients at the perturbed points.
#[derive(Debug, Clone, PartialEq)]
pub struct SamoGradients {
    /// `∇lᵢ(θ + ε̂ᵢ)` for every task.
    pub per_task: Vec<LayeredParams>,
    /// `∇l₀(θ)`, when the mode computed it.
    pub average: Option<LayeredParams>,
    /// The perturbation applied for each task.
    pub perturbations: Vec<Perturbation>,
}

/// The local term for task `i`: exact gradient, or an SPSA estimate passed
/// through the configured normalization.
fn local_term<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    task: usize,
    theta: &LayeredParams,
    reference: Option<&LayeredParams>,
    cfg: &SamConfig,
    seed: u64,
    iteration: u64,
) -> Result<LayeredParams> {
    match cfg.estimator {
        Estimator::Exact => {
            let g = problem.grad(task, theta);
            if !g.is_finite() {
                return Err(Error::numeric(Some(task), "task gradient"));
            }
            Ok(g)
        }
        Estimator::Spsa => {
            let mut rng = substream(seed, Purpose::Spsa, iteration, task as u64);
            let est = spsa_estimate(problem, task, theta, cfg.mu, cfg.spsa_samples, &mut rng)?;
            match (cfg.normalization, reference) {
                (Normalization::None, _) => Ok(est),
                (Normalization::Layerwise, Some(r)) => layerwise_normalize(&est, r),
                (Normalization::Global, Some(r)) => Ok(global_normalize(&est, r)?.vector),
                (_, None) => unreachable!("reference is computed whenever normalization needs it"),
            }
        }
    }
}

/// Sharpness-aware task gradients at `theta` for one iteration.
///
/// Pass costs per call (K tasks, one SPSA sample):
///
/// | mode / estimator | backward | forward |
/// |------------------|----------|---------|
/// | global           | K + 1    | 0       |
/// | local, exact     | 2K       | 0       |
/// | joint, exact     | 2K + 1   | 0       |
/// | joint, spsa      | K + 1    | 2K      |
///
/// `seed` and `iteration` select the SPSA substreams, one per task, so the
/// result does not depend on `cfg.parallel`.
pub fn samo_gradients<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    theta: &LayeredParams,
    cfg: &SamConfig,
    seed: u64,
    iteration: u64,
) -> Result<SamoGradients> {
    cfg.validate()?;
    if cfg.mode == SamMode::Off {
        return Err(Error::Usage("samo_gradients called with mode = off".into()));
    }
    let k = problem.num_tasks();
    let needs_reference = match cfg.mode {
        SamMode::Global | SamMode::Joint => true,
        SamMode::Local => cfg.estimator == Estimator::Spsa && cfg.normalization != Normalization::None,
        SamMode::Off => false,
    };
    let average = if needs_reference {
        let g0 = problem.avg_grad(theta);
        if !g0.is_finite() {
            return Err(Error::numeric(None, "averaged-loss gradient"));
        }
        Some(g0)
    } else {
        None
    };
    let shared = match cfg.mode {
        SamMode::Global => Some(sam_perturbation(average.as_ref().expect("computed"), cfg.rho)?),
        _ => None,
    };

    let branch = |task: usize| -> Result<(LayeredParams, Perturbation)> {
        let eps = match &shared {
            Some(p) => p.clone(),
            None => {
                let local = local_term(problem, task, theta, average.as_ref(), cfg, seed, iteration)?;
                match cfg.mode {
                    SamMode::Local => sam_perturbation(&local, cfg.rho)?,
                    _ => joint_perturbation(average.as_ref().expect("computed"), &local, cfg.rho, cfg.alpha)?,
                }
            }
        };
        let g = problem.grad(task, &axpy(1.0, &eps.vector, theta)?);
        if !g.is_finite() {
            return Err(Error::numeric(Some(task), "gradient at perturbed point"));
        }
        Ok((g, eps))
    };

    let results: Vec<Result<(LayeredParams, Perturbation)>> = if cfg.parallel {
        (0..k).into_par_iter().map(branch).collect()
    } else {
        (0..k).map(branch).collect()
    };
    let mut per_task = Vec::with_capacity(k);
    let mut perturbations = Vec::with_capacity(k);
    for r in results {
        let (g, p) = r?;
        per_task.push(g);
        perturbations.push(p);
    }
    Ok(SamoGradients {
        per_task,
        average,
        perturbations,
    })
}
