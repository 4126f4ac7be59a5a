//! Synthetic multi-task regression with a shared tanh trunk and linear
//! per-task heads.
//!
//! Targets come from planted linear teachers `y_k = w_k · x` whose unit
//! directions have a prescribed pairwise angle, which sets how strongly the
//! tasks conflict over the shared trunk.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LayeredParams;
use crate::problem::{MultiTaskProblem, PassCounters};
use crate::rng::{substream, Purpose};

/// Construction parameters of an [`MlpMultiTaskProblem`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub seed: u64,
    pub tasks: usize,
    /// Input dimension, hidden widths, feature width. At least two entries.
    pub trunk_sizes: Vec<usize>,
    pub n_samples: usize,
    /// Pairwise angle between teacher directions, in degrees.
    pub conflict_angle_deg: f64,
    /// Standard deviation of Gaussian label noise.
    pub label_noise: f64,
    /// Evaluate on a seeded subset of this size, switched every iteration.
    pub batch_size: Option<usize>,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tasks: 3,
            trunk_sizes: vec![8, 16, 8],
            n_samples: 128,
            conflict_angle_deg: 120.0,
            label_noise: 0.0,
            batch_size: None,
        }
    }
}

/// Features and per-task regression targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `n × input_dim`.
    pub features: Vec<Vec<f64>>,
    /// `n × K`.
    pub targets: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_tasks(&self) -> usize {
        self.targets.first().map_or(0, Vec::len)
    }

    /// CSV with header `x_1..x_d,target_task_1..target_task_K`.
    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let header: Vec<String> = (1..=self.input_dim())
            .map(|i| format!("x_{i}"))
            .chain((1..=self.num_tasks()).map(|k| format!("target_task_{k}")))
            .collect();
        w.write_record(&header)?;
        for (x, y) in self.features.iter().zip(&self.targets) {
            let row: Vec<String> = x.iter().chain(y).map(|v| format!("{v:.16e}")).collect();
            w.write_record(&row)?;
        }
        w.flush()
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let header = r
            .headers()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .clone();
        let d = header.iter().filter(|h| h.starts_with("x_")).count();
        let k = header.iter().filter(|h| h.starts_with("target_task_")).count();
        if d == 0 || k == 0 || d + k != header.len() {
            return Err(Error::Config(format!(
                "{}: expected columns x_*, target_task_*",
                path.display()
            )));
        }
        let mut features = Vec::new();
        let mut targets = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            features.push(vals[..d].to_vec());
            targets.push(vals[d..].to_vec());
        }
        if features.is_empty() {
            return Err(Error::Config(format!("{}: no samples", path.display())));
        }
        Ok(Self { features, targets })
    }
}

/// Unit vectors in `R^K` with pairwise inner product `cos_angle`.
///
/// Uses `w_k = a e_k + b 1` with `a = √(1 − c)` and
/// `b = (−a + √(1 + (K−1)c)) / K`, which exists iff `c ≥ −1/(K−1)`.
pub fn planted_directions(k: usize, cos_angle: f64) -> Result<Vec<Vec<f64>>> {
    if k < 2 {
        return Err(Error::Config(format!("need at least two tasks, got {k}")));
    }
    let c = cos_angle.clamp(-1.0, 1.0);
    let lead = 1.0 + (k as f64 - 1.0) * c;
    if lead < -1e-12 {
        return Err(Error::Config(format!(
            "pairwise cosine {c} is infeasible for {k} tasks (minimum {})",
            -1.0 / (k as f64 - 1.0)
        )));
    }
    let a = (1.0 - c).max(0.0).sqrt();
    let b = (-a + lead.max(0.0).sqrt()) / k as f64;
    Ok((0..k)
        .map(|i| (0..k).map(|j| if i == j { a + b } else { b }).collect())
        .collect())
}

fn cos_deg(angle: f64) -> f64 {
    // exact values at the angles used most, so 0°/90°/180° are not off by ulps
    match angle {
        a if a == 0.0 => 1.0,
        a if a == 90.0 => 0.0,
        a if a == 180.0 => -1.0,
        a => a.to_radians().cos(),
    }
}

/// Planted teacher directions in the input space and their maximum pairwise
/// cosine deviation from the target.
fn teachers(cfg: &MlpConfig) -> Result<(Vec<Vec<f64>>, f64)> {
    let k = cfg.tasks;
    let d = cfg.trunk_sizes[0];
    if d < k {
        return Err(Error::Config(format!(
            "input dimension {d} is smaller than the task count {k}"
        )));
    }
    let target = cos_deg(cfg.conflict_angle_deg);
    let small = planted_directions(k, target)?;

    // orthonormal frame of k vectors in R^d
    let mut rng = substream(cfg.seed, Purpose::Data, 0, 0);
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(k);
    while frame.len() < k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for _ in 0..2 {
            for f in &frame {
                let p: f64 = v.iter().zip(f).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(f).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            v.iter_mut().for_each(|x| *x /= n);
            frame.push(v);
        }
    }
    let dirs: Vec<Vec<f64>> = small
        .iter()
        .map(|coef| {
            (0..d)
                .map(|j| coef.iter().zip(&frame).map(|(c, f)| c * f[j]).sum())
                .collect()
        })
        .collect();

    let mut dev = 0.0f64;
    for i in 0..k {
        for j in (i + 1)..k {
            let dot: f64 = dirs[i].iter().zip(&dirs[j]).map(|(a, b)| a * b).sum();
            dev = dev.max((dot - target).abs());
        }
    }
    Ok((dirs, dev))
}

/// Shared tanh trunk, one linear head per task, per-task mean squared error.
///
/// Layer layout: trunk layer `j` is one block `[W_j (row-major, out × in), b_j]`,
/// followed by one block `[a_k, c_k]` per task head. Head `k` is owned by
/// task `k`; trunk blocks are shared.
#[derive(Debug)]
pub struct MlpMultiTaskProblem {
    config: MlpConfig,
    data: Dataset,
    teachers: Vec<Vec<f64>>,
    teacher_deviation: f64,
    initial: LayeredParams,
    epoch: AtomicU64,
    counters: PassCounters,
}

struct Activations {
    /// `hidden[0]` is the input; `hidden[j + 1]` the output of trunk layer `j`.
    hidden: Vec<Vec<f64>>,
    preds: Vec<f64>,
}

impl MlpMultiTaskProblem {
    /// Generate the planted dataset and initial parameters from `config.seed`.
    pub fn new(config: MlpConfig) -> Result<Self> {
        validate(&config)?;
        let (teachers, dev) = teachers(&config)?;
        let d = config.trunk_sizes[0];
        let mut rng = substream(config.seed, Purpose::Data, 1, 0);
        let mut features = Vec::with_capacity(config.n_samples);
        let mut targets = Vec::with_capacity(config.n_samples);
        for _ in 0..config.n_samples {
            let x: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let y: Vec<f64> = teachers
                .iter()
                .map(|w| {
                    let clean: f64 = w.iter().zip(&x).map(|(a, b)| a * b).sum();
                    let noise: f64 = rng.sample(StandardNormal);
                    clean + config.label_noise * noise
                })
                .collect();
            features.push(x);
            targets.push(y);
        }
        let data = Dataset { features, targets };
        Self::assemble(config, data, teachers, dev)
    }

    /// Use an existing dataset (e.g. one read back from CSV). Teacher
    /// directions are regenerated from the config for reporting only.
    pub fn from_dataset(config: MlpConfig, data: Dataset) -> Result<Self> {
        validate(&config)?;
        if data.input_dim() != config.trunk_sizes[0] || data.num_tasks() != config.tasks {
            return Err(Error::Config(format!(
                "dataset has {} features and {} tasks, config expects {} and {}",
                data.input_dim(),
                data.num_tasks(),
                config.trunk_sizes[0],
                config.tasks
            )));
        }
        let (teachers, dev) = teachers(&config)?;
        let mut config = config;
        config.n_samples = data.len();
        Self::assemble(config, data, teachers, dev)
    }

    fn assemble(config: MlpConfig, data: Dataset, teachers: Vec<Vec<f64>>, dev: f64) -> Result<Self> {
        let initial = init_params(&config);
        Ok(Self {
            config,
            data,
            teachers,
            teacher_deviation: dev,
            initial,
            epoch: AtomicU64::new(0),
            counters: PassCounters::new(),
        })
    }

    pub fn config(&self) -> &MlpConfig {
        &self.config
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn teacher_directions(&self) -> &[Vec<f64>] {
        &self.teachers
    }

    /// Largest `|w_i · w_j − cos ψ|` over teacher pairs.
    pub fn teacher_cosine_deviation(&self) -> f64 {
        self.teacher_deviation
    }

    fn trunk_depth(&self) -> usize {
        self.config.trunk_sizes.len() - 1
    }

    fn feature_dim(&self) -> usize {
        *self.config.trunk_sizes.last().expect("validated")
    }

    fn sample_indices(&self) -> Vec<usize> {
        let n = self.data.len();
        match self.config.batch_size {
            Some(b) if b < n => {
                let epoch = self.epoch.load(Ordering::Relaxed);
                let mut rng = substream(self.config.seed, Purpose::MiniBatch, epoch, 0);
                let mut idx = index::sample(&mut rng, n, b).into_vec();
                idx.sort_unstable();
                idx
            }
            _ => (0..n).collect(),
        }
    }

    fn forward(&self, theta: &LayeredParams, x: &[f64]) -> Activations {
        let layers = theta.layers();
        let sizes = &self.config.trunk_sizes;
        let mut hidden = Vec::with_capacity(sizes.len());
        hidden.push(x.to_vec());
        for j in 0..self.trunk_depth() {
            let (n_in, n_out) = (sizes[j], sizes[j + 1]);
            let block = &layers[j];
            let (w, b) = block.split_at(n_in * n_out);
            let input = &hidden[j];
            let out: Vec<f64> = (0..n_out)
                .map(|r| {
                    let z: f64 = w[r * n_in..(r + 1) * n_in]
                        .iter()
                        .zip(input)
                        .map(|(a, v)| a * v)
                        .sum::<f64>()
                        + b[r];
                    z.tanh()
                })
                .collect();
            hidden.push(out);
        }
        let feat = hidden.last().expect("non-empty");
        let fd = self.feature_dim();
        let preds = (0..self.config.tasks)
            .map(|k| {
                let head = &layers[self.trunk_depth() + k];
                head[..fd].iter().zip(feat).map(|(a, h)| a * h).sum::<f64>() + head[fd]
            })
            .collect();
        Activations { hidden, preds }
    }

    fn task_losses(&self, theta: &LayeredParams) -> Vec<f64> {
        let idx = self.sample_indices();
        let mut acc = vec![0.0; self.config.tasks];
        for &n in &idx {
            let act = self.forward(theta, &self.data.features[n]);
            for (k, a) in acc.iter_mut().enumerate() {
                let r = act.preds[k] - self.data.targets[n][k];
                *a += r * r;
            }
        }
        acc.iter().map(|a| a / idx.len() as f64).collect()
    }

    /// Gradient of `Σ_k weights[k] · l_k`.
    fn weighted_grad(&self, theta: &LayeredParams, weights: &[f64]) -> LayeredParams {
        let idx = self.sample_indices();
        let scale = 2.0 / idx.len() as f64;
        let sizes = &self.config.trunk_sizes;
        let depth = self.trunk_depth();
        let fd = self.feature_dim();
        let layers = theta.layers();
        let mut grad = theta.zeros_like();

        for &n in &idx {
            let act = self.forward(theta, &self.data.features[n]);
            let feat = &act.hidden[depth];
            let mut upstream = vec![0.0; fd];
            for (k, &wk) in weights.iter().enumerate() {
                if wk == 0.0 {
                    continue;
                }
                let dpred = wk * scale * (act.preds[k] - self.data.targets[n][k]);
                let head = &layers[depth + k];
                let g = grad.layer_mut(depth + k).expect("head layer");
                for i in 0..fd {
                    g[i] += dpred * feat[i];
                    upstream[i] += dpred * head[i];
                }
                g[fd] += dpred;
            }
            for j in (0..depth).rev() {
                let (n_in, n_out) = (sizes[j], sizes[j + 1]);
                let out = &act.hidden[j + 1];
                let input = &act.hidden[j];
                let delta: Vec<f64> = upstream
                    .iter()
                    .zip(out)
                    .map(|(u, h)| u * (1.0 - h * h))
                    .collect();
                let g = grad.layer_mut(j).expect("trunk layer");
                for r in 0..n_out {
                    let row = &mut g[r * n_in..(r + 1) * n_in];
                    for (gv, xv) in row.iter_mut().zip(input) {
                        *gv += delta[r] * xv;
                    }
                    g[n_in * n_out + r] += delta[r];
                }
                if j > 0 {
                    let w = &layers[j][..n_in * n_out];
                    upstream = (0..n_in)
                        .map(|c| (0..n_out).map(|r| w[r * n_in + c] * delta[r]).sum())
                        .collect();
                }
            }
        }
        grad
    }
}

fn validate(cfg: &MlpConfig) -> Result<()> {
    if cfg.tasks < 2 {
        return Err(Error::Config(format!("tasks must be at least 2, got {}", cfg.tasks)));
    }
    if cfg.trunk_sizes.len() < 2 || cfg.trunk_sizes.contains(&0) {
        return Err(Error::Config(
            "trunk_sizes needs an input and a feature width, all positive".into(),
        ));
    }
    if cfg.n_samples == 0 {
        return Err(Error::Config("n_samples must be positive".into()));
    }
    if !(0.0..=180.0).contains(&cfg.conflict_angle_deg) {
        return Err(Error::Config(format!(
            "conflict_angle must lie in [0, 180] degrees, got {}",
            cfg.conflict_angle_deg
        )));
    }
    if !(cfg.label_noise >= 0.0 && cfg.label_noise.is_finite()) {
        return Err(Error::Config("label_noise must be a finite non-negative number".into()));
    }
    if cfg.batch_size == Some(0) {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    Ok(())
}

fn init_params(cfg: &MlpConfig) -> LayeredParams {
    let mut rng = substream(cfg.seed, Purpose::Init, 0, 0);
    let sizes = &cfg.trunk_sizes;
    let mut layers = Vec::new();
    for j in 0..sizes.len() - 1 {
        let (n_in, n_out) = (sizes[j], sizes[j + 1]);
        let std = (1.0 / n_in as f64).sqrt();
        let mut block: Vec<f64> = (0..n_in * n_out)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        block.extend(std::iter::repeat_n(0.0, n_out));
        layers.push(block);
    }
    // every head starts from the same draw
    let fd = *sizes.last().expect("validated");
    let std = 0.5 * (1.0 / fd as f64).sqrt();
    let mut head: Vec<f64> = (0..fd)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    head.push(0.0);
    for _ in 0..cfg.tasks {
        layers.push(head.clone());
    }
    LayeredParams::new(layers).expect("finite initialization")
}

impl MultiTaskProblem for MlpMultiTaskProblem {
    fn num_tasks(&self) -> usize {
        self.config.tasks
    }

    fn layer_lens(&self) -> Vec<usize> {
        let sizes = &self.config.trunk_sizes;
        let fd = self.feature_dim();
        (0..self.trunk_depth())
            .map(|j| sizes[j] * sizes[j + 1] + sizes[j + 1])
            .chain(std::iter::repeat_n(fd + 1, self.config.tasks))
            .collect()
    }

    fn layer_owner(&self, d: usize) -> Option<usize> {
        d.checked_sub(self.trunk_depth())
    }

    fn initial_params(&self) -> LayeredParams {
        self.initial.clone()
    }

    fn counters(&self) -> &PassCounters {
        &self.counters
    }

    fn eval_loss(&self, task: usize, theta: &LayeredParams) -> f64 {
        self.task_losses(theta)[task]
    }

    fn eval_losses(&self, theta: &LayeredParams) -> Vec<f64> {
        self.task_losses(theta)
    }

    fn eval_grad(&self, task: usize, theta: &LayeredParams) -> LayeredParams {
        let mut w = vec![0.0; self.config.tasks];
        w[task] = 1.0;
        self.weighted_grad(theta, &w)
    }

    fn eval_avg_grad(&self, theta: &LayeredParams) -> LayeredParams {
        let k = self.config.tasks;
        self.weighted_grad(theta, &vec![1.0 / k as f64; k])
    }

    fn begin_iteration(&self, t: usize) {
        self.epoch.store(t as u64, Ordering::Relaxed);
    }
}
