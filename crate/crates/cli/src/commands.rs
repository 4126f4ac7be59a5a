//! The four subcommands as library functions, so tests can drive them
//! without spawning the binary.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use rayon::prelude::*;
use samo_core::diagnostics::{cosine_matrix, delta_m, hessian_spectrum, CosineMatrix, SpectrumConfig, SpectrumReport};
use samo_core::optimizer::{run_from, OptimizerConfig, Schedule, Trajectory};
use samo_core::problems::{toy_pareto_grid, ToyProblem};
use samo_core::sam::{Estimator, Normalization, SamConfig, SamMode};
use samo_core::weighting;
use samo_core::{LayeredParams, MultiTaskProblem};

use crate::config::{resolve_output, BuiltProblem, ExperimentConfig, ProblemSpec};
use crate::error::{CliError, Result};
use crate::output::{self, Summary, SweepRow, ToyFigureRow, ToyRow};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Per-task gradients at `theta` restricted to the shared layers.
fn shared_gradients(problem: &dyn MultiTaskProblem, theta: &LayeredParams) -> Result<Vec<LayeredParams>> {
    let mask = problem.shared_mask();
    (0..problem.num_tasks())
        .map(|i| Ok(problem.eval_grad(i, theta).select_layers(&mask)?))
        .collect()
}

/// Result of one run. A numeric abort is reported through
/// `summary.aborted` rather than as an error, after the partial outputs are
/// written.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: Summary,
    pub final_params: Option<LayeredParams>,
}

impl RunOutcome {
    pub fn aborted(&self) -> bool {
        self.summary.aborted.is_some()
    }
}

/// Execute one experiment into its (resolved) output directory.
pub fn cmd_run(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    run_into(cfg, &cfg.resolved_output_dir())
}

fn run_into(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    create_dir(dir)?;
    let built = cfg.build_problem()?;
    let problem = built.as_problem();
    if let BuiltProblem::Mlp(p) = &built {
        let path = dir.join(output::DATASET_FILE);
        p.dataset().write_csv(&path).map_err(|e| CliError::io(&path, e))?;
    }
    let method = cfg.weighting_method()?;
    let k = problem.num_tasks();
    let every = cfg.diagnostics.cosine_every;
    let mut cosines: Vec<(usize, CosineMatrix)> = Vec::new();
    let mut hook = |t: usize, theta: &LayeredParams| -> samo_core::Result<Vec<(String, f64)>> {
        if every == 0 || t % every != 0 || k < 2 {
            return Ok(Vec::new());
        }
        let mask = problem.shared_mask();
        let grads = (0..k)
            .map(|i| problem.grad(i, theta).select_layers(&mask))
            .collect::<samo_core::Result<Vec<_>>>()?;
        let m = cosine_matrix(&grads)?;
        let mean = m.mean_off_diagonal();
        cosines.push((t, m));
        Ok(vec![("mean_cosine".into(), mean)])
    };

    info!("running {} steps into {}", cfg.optimizer.steps, dir.display());
    let result = run_from(
        problem,
        problem.initial_params(),
        method.as_ref(),
        &cfg.sam,
        &cfg.optimizer,
        &mut hook,
    );
    for (t, m) in &cosines {
        output::write_cosine(&dir.join(output::cosine_file_name(*t)), m)?;
    }

    let (traj, final_params, aborted) = match result {
        Ok(traj) => {
            let theta = traj.final_params.clone();
            (traj, theta, None)
        }
        Err(err) => {
            if !matches!(err.source, samo_core::Error::Numeric { .. }) {
                return Err(err.source.into());
            }
            warn!("{err}");
            if let Some(last) = &err.last_good {
                output::write_json(&dir.join(output::LAST_GOOD_FILE), last)?;
            }
            (err.partial.clone(), None, Some(err.to_string()))
        }
    };
    output::write_trajectory(&dir.join(output::TRAJECTORY_FILE), k, &traj)?;

    let mut summary = Summary {
        seed: cfg.optimizer.seed,
        steps: cfg.optimizer.steps,
        steps_completed: traj.steps_completed,
        aborted,
        final_losses: traj.final_losses.clone(),
        mean_final_loss: traj.final_losses.as_ref().map(|l| l.iter().sum::<f64>() / l.len() as f64),
        final_grad_norm: None,
        final_mean_cosine: None,
        delta_m: None,
        passes: traj.total_passes,
        lambda_max: None,
        config: cfg.clone(),
    };
    if let Some(theta) = &final_params {
        output::write_json(&dir.join(output::PARAMS_FILE), theta)?;
        summary.final_grad_norm = Some(problem.eval_avg_grad(theta).global_norm());
        if k >= 2 {
            summary.final_mean_cosine = Some(cosine_matrix(&shared_gradients(problem, theta)?)?.mean_off_diagonal());
        }
        if let Some(specs) = traj.final_losses.as_deref().and_then(|l| cfg.metric_specs(l)) {
            summary.delta_m = Some(delta_m(&specs)?);
        }
        if cfg.diagnostics.spectrum_at_end {
            let spec = SpectrumConfig {
                k: cfg.diagnostics.k,
                seed: cfg.optimizer.seed,
                ..SpectrumConfig::default()
            };
            let report = hessian_spectrum(problem, theta, &spec)?;
            summary.lambda_max = Some(report.lambda_max);
            output::write_json(&dir.join(output::SPECTRUM_FILE), &report)?;
        }
    }
    output::write_json(&dir.join(output::SUMMARY_FILE), &summary)?;
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
        final_params,
    })
}

/// Settings shared by every method of the toy figure.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFigureOptions {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub schedule: Schedule,
    pub rho: f64,
    pub alpha: f64,
    pub mu: f64,
    pub seed: u64,
    /// Landscape grid nodes per axis.
    pub resolution: usize,
}

impl Default for ToyFigureOptions {
    fn default() -> Self {
        Self {
            steps: 5000,
            lr: 0.5,
            momentum: 0.9,
            schedule: Schedule::HalveAt(0.5),
            rho: 0.5,
            alpha: 0.5,
            mu: 0.01,
            seed: 0,
            resolution: 121,
        }
    }
}

impl ToyFigureOptions {
    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            steps: self.steps,
            schedule: self.schedule,
            momentum: self.momentum,
            seed: self.seed,
            snapshots: true,
            ..OptimizerConfig::default()
        }
    }
}

pub const DEFAULT_TOY_METHODS: [&str; 2] = ["ls", "ls+gsam"];

/// Parse `<weighting>[+gsam|+lsam|+samo]` into a weighting name and SAM
/// settings. `gsam` perturbs with the averaged gradient, `lsam` with each
/// exact task gradient, `samo` jointly with SPSA estimates.
pub fn parse_method(name: &str, opts: &ToyFigureOptions) -> Result<(String, SamConfig)> {
    let (w, variant) = match name.split_once('+') {
        Some((w, v)) => (w, Some(v)),
        None => (name, None),
    };
    weighting::by_name(w).map_err(|e| CliError::Config(format!("method '{name}': {e}")))?;
    let base = SamConfig {
        rho: opts.rho,
        alpha: opts.alpha,
        mu: opts.mu,
        ..SamConfig::default()
    };
    let sam = match variant {
        None => SamConfig { mode: SamMode::Off, ..base },
        Some("gsam") => SamConfig { mode: SamMode::Global, ..base },
        Some("lsam") => SamConfig {
            mode: SamMode::Local,
            estimator: Estimator::Exact,
            normalization: Normalization::None,
            ..base
        },
        Some("samo") => SamConfig { mode: SamMode::Joint, ..base },
        Some(other) => {
            return Err(CliError::Config(format!(
                "method '{name}': unknown variant '{other}' (expected gsam, lsam or samo)"
            )))
        }
    };
    Ok((w.to_string(), sam))
}

pub fn toy_trajectory_file_name(method: &str) -> String {
    format!("traj_{}.csv", method.replace('+', "_"))
}

fn toy_rows(problem: &ToyProblem, traj: &Trajectory) -> Vec<ToyRow> {
    let row = |iter: usize, theta: &LayeredParams| {
        let x = theta.to_flat();
        let l = problem.eval_losses(theta);
        ToyRow {
            iter,
            x1: x[0],
            x2: x[1],
            f1: l[0],
            f2: l[1],
        }
    };
    let mut rows: Vec<ToyRow> = traj
        .records
        .iter()
        .filter_map(|r| r.params.as_ref().map(|p| row(r.iteration, p)))
        .collect();
    if let Some(last) = &traj.final_params {
        rows.push(row(traj.steps_completed, last));
    }
    rows
}

/// Landscape grid plus one trajectory per method, all from (−6, 1).
pub fn cmd_toy_figure(out: &Path, methods: &[String], opts: &ToyFigureOptions) -> Result<Vec<ToyFigureRow>> {
    if methods.is_empty() {
        return Err(CliError::Config("toy-figure needs at least one method".into()));
    }
    if opts.resolution < 2 {
        return Err(CliError::Config("resolution must be at least 2".into()));
    }
    let parsed = methods
        .iter()
        .map(|m| parse_method(m, opts))
        .collect::<Result<Vec<_>>>()?;
    let dir = resolve_output(out);
    create_dir(&dir)?;
    output::write_grid(&dir.join(output::GRID_FILE), &toy_pareto_grid(opts.resolution))?;

    let opt = opts.optimizer();
    let mut summary = Vec::with_capacity(methods.len());
    for (name, (w, sam)) in methods.iter().zip(&parsed) {
        let problem = ToyProblem::new();
        let method = weighting::by_name(w)?;
        info!("toy figure: {name}");
        let traj = run_from(&problem, problem.initial_params(), method.as_ref(), sam, &opt, &mut |_, _| {
            Ok(Vec::new())
        })
        .map_err(|e| CliError::from(e.source))?;
        let rows = toy_rows(&problem, &traj);
        output::write_toy_trajectory(&dir.join(toy_trajectory_file_name(name)), &rows)?;
        let theta = traj.final_params.expect("completed run");
        let last = rows.last().expect("at least the final row");
        let spec = SpectrumConfig {
            k: 1,
            ..SpectrumConfig::default()
        };
        summary.push(ToyFigureRow {
            method: name.clone(),
            x1: last.x1,
            x2: last.x2,
            f1: last.f1,
            f2: last.f2,
            grad_norm: problem.eval_avg_grad(&theta).global_norm(),
            lambda_max: hessian_spectrum(&problem, &theta, &spec)?.lambda_max,
        });
    }
    output::write_toy_figure_summary(&dir.join(output::TOY_FIGURE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Alpha,
    Rho,
    Mu,
    Lr,
    ConflictAngle,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::Alpha => "alpha",
            SweepAxis::Rho => "rho",
            SweepAxis::Mu => "mu",
            SweepAxis::Lr => "lr",
            SweepAxis::ConflictAngle => "conflict_angle",
        }
    }

    fn apply(self, cfg: &mut ExperimentConfig, value: f64) -> Result<()> {
        match self {
            SweepAxis::Alpha => cfg.sam.alpha = value,
            SweepAxis::Rho => cfg.sam.rho = value,
            SweepAxis::Mu => cfg.sam.mu = value,
            SweepAxis::Lr => cfg.optimizer.lr = value,
            SweepAxis::ConflictAngle => match &mut cfg.problem {
                ProblemSpec::Mlp { params, dataset: None } => params.conflict_angle_deg = value,
                _ => {
                    return Err(CliError::Config(
                        "axis conflict_angle needs a generated mlp problem".into(),
                    ))
                }
            },
        }
        Ok(())
    }
}

impl FromStr for SweepAxis {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(SweepAxis::Alpha),
            "rho" => Ok(SweepAxis::Rho),
            "mu" => Ok(SweepAxis::Mu),
            "lr" => Ok(SweepAxis::Lr),
            "conflict_angle" => Ok(SweepAxis::ConflictAngle),
            other => Err(CliError::Config(format!(
                "unknown sweep axis '{other}' (expected alpha, rho, mu, lr or conflict_angle)"
            ))),
        }
    }
}

/// One sub-run per value in `<output_dir>/<axis>_<index>`, with seed
/// `base seed + index`, collated into `sweep_summary.csv`.
pub fn cmd_sweep(base: &ExperimentConfig, axis: SweepAxis, values: &[f64], parallel: bool) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(CliError::Config("sweep needs at least one value".into()));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(CliError::Config(format!("sweep value {bad} is not finite")));
    }
    let root = base.resolved_output_dir();
    let subs = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut cfg = base.clone();
            axis.apply(&mut cfg, v)?;
            cfg.optimizer.seed = base.optimizer.seed.wrapping_add(i as u64);
            cfg.output_dir = root.join(format!("{}_{i:02}", axis.name()));
            cfg.validate()
                .map_err(|e| CliError::Config(format!("{}={v}: {e}", axis.name())))?;
            Ok(cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    create_dir(&root)?;

    let one = |(i, cfg): (usize, &ExperimentConfig)| -> Result<SweepRow> {
        let out = run_into(cfg, &cfg.output_dir)?;
        let s = out.summary;
        Ok(SweepRow {
            index: i,
            axis: axis.name().into(),
            value: values[i],
            seed: s.seed,
            status: if s.aborted.is_some() { "aborted" } else { "ok" }.into(),
            steps_completed: s.steps_completed,
            final_losses: s.final_losses,
            mean_loss: s.mean_final_loss,
            grad_norm: s.final_grad_norm,
            mean_cosine: s.final_mean_cosine,
            lambda_max: s.lambda_max,
            delta_m: s.delta_m,
        })
    };
    let rows = if parallel {
        subs.par_iter().enumerate().map(one).collect::<Result<Vec<_>>>()?
    } else {
        subs.iter().enumerate().map(one).collect::<Result<Vec<_>>>()?
    };
    let k = base.build_problem()?.as_problem().num_tasks();
    output::write_sweep_summary(&root.join(output::SWEEP_SUMMARY_FILE), k, &rows)?;
    Ok(rows)
}

/// Hessian spectrum of the averaged loss at a saved parameter snapshot.
pub fn cmd_spectrum(cfg: &ExperimentConfig, params: &Path, k: Option<usize>, seed: Option<u64>) -> Result<SpectrumReport> {
    let built = cfg.build_problem()?;
    let problem = built.as_problem();
    let theta: LayeredParams = output::read_json(params)?;
    if theta.layer_lens() != problem.layer_lens() {
        return Err(CliError::Config(format!(
            "{}: parameter layers {:?} do not match the problem's {:?}",
            params.display(),
            theta.layer_lens(),
            problem.layer_lens()
        )));
    }
    let spec = SpectrumConfig {
        k: k.unwrap_or(cfg.diagnostics.k),
        seed: seed.unwrap_or(cfg.optimizer.seed),
        ..SpectrumConfig::default()
    };
    Ok(hessian_spectrum(problem, &theta, &spec)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names() {
        let o = ToyFigureOptions::default();
        assert_eq!(parse_method("ls", &o).unwrap().1.mode, SamMode::Off);
        assert_eq!(parse_method("ls+gsam", &o).unwrap().1.mode, SamMode::Global);
        let (w, s) = parse_method("mgda+samo", &o).unwrap();
        assert_eq!((w.as_str(), s.mode, s.estimator), ("mgda", SamMode::Joint, Estimator::Spsa));
        let (_, s) = parse_method("pcgrad+lsam", &o).unwrap();
        assert_eq!((s.mode, s.estimator), (SamMode::Local, Estimator::Exact));
        assert!(parse_method("ls+fsam", &o).is_err());
        assert!(parse_method("nash", &o).is_err());
        assert_eq!(toy_trajectory_file_name("ls+gsam"), "traj_ls_gsam.csv");
    }

    #[test]
    fn axis_names_round_trip() {
        for a in [SweepAxis::Alpha, SweepAxis::Rho, SweepAxis::Mu, SweepAxis::Lr, SweepAxis::ConflictAngle] {
            assert_eq!(a.name().parse::<SweepAxis>().unwrap(), a);
        }
        assert!("beta".parse::<SweepAxis>().is_err());
    }
}
