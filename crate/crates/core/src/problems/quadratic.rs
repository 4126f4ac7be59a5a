//! Quadratic (and affine) multi-task problems with closed-form gradients
//! and Hessians. Used as reference problems in tests and sanity runs.

use crate::error::{Error, Result};
use crate::params::LayeredParams;
use crate::problem::{MultiTaskProblem, PassCounters};

/// `l(θ) = ½ θᵀAθ + bᵀθ + c` over the flattened parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticTask {
    /// Row-major symmetric `m × m` matrix; `None` for an affine loss.
    pub hessian: Option<Vec<f64>>,
    pub linear: Vec<f64>,
    pub constant: f64,
}

impl QuadraticTask {
    pub fn affine(linear: Vec<f64>, constant: f64) -> Self {
        Self {
            hessian: None,
            linear,
            constant,
        }
    }

    pub fn diagonal(curvatures: &[f64]) -> Self {
        let m = curvatures.len();
        let mut a = vec![0.0; m * m];
        for (i, &c) in curvatures.iter().enumerate() {
            a[i * m + i] = c;
        }
        Self {
            hessian: Some(a),
            linear: vec![0.0; m],
            constant: 0.0,
        }
    }

    /// `½‖θ‖²`.
    pub fn isotropic(m: usize) -> Self {
        Self::diagonal(&vec![1.0; m])
    }

    fn loss(&self, x: &[f64]) -> f64 {
        let lin: f64 = self.linear.iter().zip(x).map(|(b, v)| b * v).sum();
        let quad = match &self.hessian {
            Some(a) => {
                let m = x.len();
                let mut acc = 0.0;
                for i in 0..m {
                    let row: f64 = (0..m).map(|j| a[i * m + j] * x[j]).sum();
                    acc += x[i] * row;
                }
                0.5 * acc
            }
            None => 0.0,
        };
        quad + lin + self.constant
    }

    fn grad(&self, x: &[f64]) -> Vec<f64> {
        let m = x.len();
        (0..m)
            .map(|i| {
                let ax = match &self.hessian {
                    Some(a) => (0..m).map(|j| a[i * m + j] * x[j]).sum(),
                    None => 0.0,
                };
                ax + self.linear[i]
            })
            .collect()
    }
}

/// A set of quadratic tasks over a fixed layer structure.
#[derive(Debug)]
pub struct QuadraticProblem {
    layer_lens: Vec<usize>,
    tasks: Vec<QuadraticTask>,
    start: LayeredParams,
    counters: PassCounters,
}

impl QuadraticProblem {
    pub fn new(layer_lens: Vec<usize>, tasks: Vec<QuadraticTask>, start: LayeredParams) -> Result<Self> {
        let m: usize = layer_lens.iter().sum();
        if tasks.is_empty() {
            return Err(Error::Config("quadratic problem needs at least one task".into()));
        }
        if start.layer_lens() != layer_lens {
            return Err(Error::Structure("start point does not match layer lengths".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.linear.len() != m {
                return Err(Error::Structure(format!("task {i}: linear term has wrong length")));
            }
            if let Some(a) = &t.hessian {
                if a.len() != m * m {
                    return Err(Error::Structure(format!("task {i}: Hessian has wrong size")));
                }
                for r in 0..m {
                    for c in 0..r {
                        if a[r * m + c] != a[c * m + r] {
                            return Err(Error::Config(format!("task {i}: Hessian is not symmetric")));
                        }
                    }
                }
            }
        }
        Ok(Self {
            layer_lens,
            tasks,
            start,
            counters: PassCounters::new(),
        })
    }

    /// Single-layer problem starting at the zero vector.
    pub fn single_layer(tasks: Vec<QuadraticTask>) -> Result<Self> {
        let m = tasks
            .first()
            .map(|t| t.linear.len())
            .ok_or_else(|| Error::Config("quadratic problem needs at least one task".into()))?;
        Self::new(vec![m], tasks, LayeredParams::zeros(&[m]))
    }

    pub fn with_start(mut self, start: LayeredParams) -> Result<Self> {
        if start.layer_lens() != self.layer_lens {
            return Err(Error::Structure("start point does not match layer lengths".into()));
        }
        self.start = start;
        Ok(self)
    }

    pub fn task(&self, i: usize) -> &QuadraticTask {
        &self.tasks[i]
    }

    /// Hessian of the averaged loss as a dense row-major matrix.
    pub fn average_hessian(&self) -> Vec<f64> {
        let m: usize = self.layer_lens.iter().sum();
        let mut out = vec![0.0; m * m];
        for t in &self.tasks {
            if let Some(a) = &t.hessian {
                for (o, v) in out.iter_mut().zip(a) {
                    *o += v / self.tasks.len() as f64;
                }
            }
        }
        out
    }
}

impl MultiTaskProblem for QuadraticProblem {
    fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    fn layer_lens(&self) -> Vec<usize> {
        self.layer_lens.clone()
    }

    fn initial_params(&self) -> LayeredParams {
        self.start.clone()
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }

    fn eval_loss(&self, task: usize, theta: &LayeredParams) -> f64 {
        self.tasks[task].loss(&theta.to_flat())
    }

    fn eval_grad(&self, task: usize, theta: &LayeredParams) -> LayeredParams {
        let g = self.tasks[task].grad(&theta.to_flat());
        let mut out = theta.zeros_like();
        let mut offset = 0;
        for d in 0..out.num_layers() {
            let block = out.layer_mut(d).expect("layer in range");
            let n = block.len();
            block.copy_from_slice(&g[offset..offset + n]);
            offset += n;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::check_gradients;

    #[test]
    fn gradient_check_quadratic_and_affine() {
        let theta = LayeredParams::new(vec![vec![0.3, -1.2], vec![2.0, 0.7, -0.4]]).unwrap();
        let iso = QuadraticProblem::new(
            vec![2, 3],
            vec![QuadraticTask::isotropic(5)],
            theta.zeros_like(),
        )
        .unwrap();
        let report = check_gradients(&iso, &theta, 10, 1e-5, 1).unwrap();
        assert!(report[0].max_rel_error <= 1e-6, "{report:?}");

        let affine = QuadraticProblem::new(
            vec![2, 3],
            vec![QuadraticTask::affine(vec![1.0, -2.0, 0.5, 3.0, -1.5], 0.0)],
            theta.zeros_like(),
        )
        .unwrap();
        // roundoff in the difference scales with |l(θ)| / h, so probe where l is small
        let report = check_gradients(&affine, &theta.zeros_like(), 10, 1e-5, 1).unwrap();
        assert!(report[0].max_rel_error <= 1e-10, "{report:?}");
    }

    #[test]
    fn rejects_asymmetric_hessian() {
        let t = QuadraticTask {
            hessian: Some(vec![1.0, 2.0, 0.0, 1.0]),
            linear: vec![0.0; 2],
            constant: 0.0,
        };
        assert!(QuadraticProblem::single_layer(vec![t]).is_err());
    }
}
