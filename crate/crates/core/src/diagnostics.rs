//! Conflict and sharpness instrumentation.
//!
//! * [`cosine_matrix`]: pairwise cosine similarity of task gradients.
//! * [`hvp`] / [`hessian_spectrum`]: matrix-free Hessian probes of the
//!   averaged loss. Hessian-vector products are central differences of the
//!   averaged-loss gradient; the top of the spectrum comes from Lanczos with
//!   full reorthogonalization.
//! * [`delta_m`]: mean signed relative change of a set of metrics against
//!   baselines, in percent (lower is better).

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{axpy, LayeredParams};
use crate::problem::MultiTaskProblem;
use crate::rng::{substream, Purpose};
use crate::sam::DEGENERATE_NORM;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineMatrix {
    pub values: Vec<Vec<f64>>,
    /// Gradients with norm below 1e-12; their rows are zero off the
    /// diagonal and zero on it.
    pub degenerate: Vec<bool>,
}

impl CosineMatrix {
    /// Mean of the entries above the diagonal.
    pub fn mean_off_diagonal(&self) -> f64 {
        let k = self.values.len();
        let mut sum = 0.0;
        let mut n = 0usize;
        for i in 0..k {
            for j in (i + 1)..k {
                sum += self.values[i][j];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

pub fn cosine_matrix(gradients: &[LayeredParams]) -> Result<CosineMatrix> {
    if gradients.len() < 2 {
        return Err(Error::Usage("cosine matrix needs at least two gradients".into()));
    }
    let norms: Vec<f64> = gradients.iter().map(LayeredParams::global_norm).collect();
    let degenerate: Vec<bool> = norms.iter().map(|&n| n < DEGENERATE_NORM).collect();
    let k = gradients.len();
    let mut values = vec![vec![0.0; k]; k];
    for i in 0..k {
        if !degenerate[i] {
            values[i][i] = 1.0;
        }
        for j in (i + 1)..k {
            let c = if degenerate[i] || degenerate[j] {
                0.0
            } else {
                (gradients[i].dot(&gradients[j])? / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            };
            values[i][j] = c;
            values[j][i] = c;
        }
    }
    Ok(CosineMatrix { values, degenerate })
}

/// Default finite-difference step for Hessian probes at `theta`.
pub fn default_hvp_delta(theta: &LayeredParams) -> f64 {
    1e-4 * (1.0 + theta.global_norm())
}

/// Hessian-vector product of the averaged loss,
/// `(∇l₀(θ + δu) − ∇l₀(θ − δu)) ‖v‖ / 2δ` with `u = v / ‖v‖`.
/// Costs two backward passes.
pub fn hvp<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    theta: &LayeredParams,
    v: &LayeredParams,
    delta: f64,
) -> Result<LayeredParams> {
    if !(delta > 0.0) {
        return Err(Error::Config(format!("hvp step must be positive, got {delta}")));
    }
    let norm = v.global_norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Usage("hvp direction must have positive finite norm".into()));
    }
    let u = v.scaled(1.0 / norm);
    let plus = problem.avg_grad(&axpy(delta, &u, theta)?);
    let minus = problem.avg_grad(&axpy(-delta, &u, theta)?);
    let out = plus.sub(&minus)?.scaled(norm / (2.0 * delta));
    if !out.is_finite() {
        return Err(Error::numeric(None, "Hessian-vector probe"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectrumConfig {
    /// Number of top eigenvalues.
    pub k: usize,
    /// Lanczos steps; `None` means `20 k`.
    pub iters: Option<usize>,
    /// Residual tolerance `‖Hv − λv‖` for unit Ritz vectors.
    pub tol: f64,
    pub seed: u64,
    /// Finite-difference step; `None` means `1e-4 (1 + ‖θ‖)`.
    pub delta: Option<f64>,
}

impl Default for SpectrumConfig {
    fn default() -> Self {
        Self {
            k: 5,
            iters: None,
            tol: 1e-6,
            seed: 0,
            delta: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    /// Top eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    pub lambda_max: f64,
    /// `λ_max / λ_5` when at least five eigenvalues were requested.
    pub bulk_ratio: Option<f64>,
    /// `‖H y − λ y‖` for each unit Ritz pair, in the order of `eigenvalues`.
    pub residuals: Vec<f64>,
    pub lanczos_steps: usize,
    /// Some residual is above the tolerance.
    pub approximate: bool,
}

fn flat_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn orthogonalize(w: &mut [f64], basis: &[Vec<f64>]) {
    for _ in 0..2 {
        for q in basis {
            let p = flat_dot(w, q);
            w.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
        }
    }
}

fn tridiagonal_eigen(alpha: &[f64], beta: &[f64]) -> (Vec<f64>, DMatrix<f64>) {
    let m = alpha.len();
    let t = DMatrix::from_fn(m, m, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

/// Indices of the eigenvalues sorted in descending order.
fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Top-k eigenvalues of the averaged-loss Hessian at `theta`.
///
/// Lanczos runs until the top-k residual estimates fall below `tol`, the
/// step budget is spent, or the Krylov space covers the whole parameter
/// space. An invariant subspace restarts the recurrence from a fresh random
/// vector orthogonal to the basis, so repeated eigenvalues are found.
pub fn hessian_spectrum<P: MultiTaskProblem + ?Sized>(
    problem: &P,
    theta: &LayeredParams,
    cfg: &SpectrumConfig,
) -> Result<SpectrumReport> {
    let n = theta.dim();
    let k = cfg.k;
    if k == 0 {
        return Err(Error::Config("spectrum needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Config(format!(
            "parameter dimension {n} is smaller than k = {k}"
        )));
    }
    let lens = theta.layer_lens();
    let delta = cfg.delta.unwrap_or_else(|| default_hvp_delta(theta));
    let max_steps = cfg.iters.unwrap_or(20 * k).max(k).min(n);
    let mut rng = substream(cfg.seed, Purpose::Lanczos, 0, 0);
    let mut random_unit = |basis: &[Vec<f64>]| -> Option<Vec<f64>> {
        for _ in 0..8 {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            orthogonalize(&mut v, basis);
            let norm = flat_dot(&v, &v).sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                return Some(v);
            }
        }
        None
    };
    let apply = |q: &[f64]| -> Result<Vec<f64>> {
        let v = LayeredParams::from_flat(&lens, q)?;
        Ok(hvp(problem, theta, &v, delta)?.to_flat())
    };

    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(max_steps);
    let mut alpha: Vec<f64> = Vec::with_capacity(max_steps);
    let mut beta: Vec<f64> = Vec::with_capacity(max_steps);
    let mut q = random_unit(&basis).expect("n >= 1");
    let mut scale = 0.0f64;

    loop {
        let mut w = apply(&q)?;
        let a = flat_dot(&w, &q);
        basis.push(q);
        alpha.push(a);
        orthogonalize(&mut w, &basis);
        let b = flat_dot(&w, &w).sqrt();
        scale = scale.max(a.abs()).max(b);
        let j = basis.len();
        if j >= max_steps {
            break;
        }

        if j >= k {
            let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
            let order = descending(&vals);
            let converged = order[..k].iter().all(|&i| (b * vecs[(j - 1, i)]).abs() <= cfg.tol);
            if converged {
                break;
            }
        }

        if b <= 1e-10 * scale.max(1e-300) {
            match random_unit(&basis) {
                Some(fresh) => {
                    beta.push(0.0);
                    q = fresh;
                }
                None => break,
            }
        } else {
            beta.push(b);
            q = w.iter().map(|x| x / b).collect();
        }
    }

    let (vals, vecs) = tridiagonal_eigen(&alpha, &beta);
    let order = descending(&vals);
    let m = basis.len();
    let mut eigenvalues = Vec::with_capacity(k);
    let mut residuals = Vec::with_capacity(k);
    for &i in order.iter().take(k) {
        let lambda = vals[i];
        let mut y = vec![0.0; n];
        for (r, qr) in basis.iter().enumerate() {
            let s = vecs[(r, i)];
            y.iter_mut().zip(qr).for_each(|(a, b)| *a += s * b);
        }
        let norm = flat_dot(&y, &y).sqrt();
        y.iter_mut().for_each(|x| *x /= norm);
        let hy = apply(&y)?;
        let res = hy
            .iter()
            .zip(&y)
            .map(|(h, v)| (h - lambda * v).powi(2))
            .sum::<f64>()
            .sqrt();
        eigenvalues.push(lambda);
        residuals.push(res);
    }
    let lambda_max = eigenvalues[0];
    let bulk_ratio = (k >= 5).then(|| lambda_max / eigenvalues[4]);
    let approximate = residuals.iter().any(|&r| r > cfg.tol);
    Ok(SpectrumReport {
        eigenvalues,
        lambda_max,
        bulk_ratio,
        residuals,
        lanczos_steps: m,
        approximate,
    })
}

/// One metric compared against its baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(default)]
    pub name: String,
    pub baseline: f64,
    pub method: f64,
    pub higher_is_better: bool,
}

/// `(1/n) Σ (−1)^{δ_k} (M_m,k − M_b,k) / M_b,k × 100` with `δ_k = 1` for
/// higher-is-better metrics. Lower is better.
pub fn delta_m(specs: &[MetricSpec]) -> Result<f64> {
    if specs.is_empty() {
        return Err(Error::Usage("delta_m needs at least one metric".into()));
    }
    let mut sum = 0.0;
    for (i, s) in specs.iter().enumerate() {
        if s.baseline == 0.0 || !s.baseline.is_finite() {
            let name = if s.name.is_empty() { format!("#{i}") } else { s.name.clone() };
            return Err(Error::Config(format!("metric {name} has a zero or non-finite baseline")));
        }
        let sign = if s.higher_is_better { -1.0 } else { 1.0 };
        sum += sign * (s.method - s.baseline) / s.baseline;
    }
    Ok(sum / specs.len() as f64 * 100.0)
}
