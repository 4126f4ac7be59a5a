//! File formats written by the commands, with matching readers.
//!
//! Reals are written as `{:.16e}` (17 significant digits), so every file
//! reads back to the exact values that were written.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use samo_core::diagnostics::CosineMatrix;
use samo_core::optimizer::Trajectory;
use samo_core::problems::GridPoint;
use samo_core::PassCount;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const SPECTRUM_FILE: &str = "spectrum.json";
pub const PARAMS_FILE: &str = "params.json";
pub const LAST_GOOD_FILE: &str = "params_last_good.json";
pub const DATASET_FILE: &str = "dataset.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const SWEEP_SUMMARY_FILE: &str = "sweep_summary.csv";
pub const TOY_FIGURE_SUMMARY_FILE: &str = "toy_figure_summary.csv";

pub fn real(x: f64) -> String {
    format!("{x:.16e}")
}

fn opt_real(x: Option<f64>) -> String {
    x.map(real).unwrap_or_default()
}

fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<File>> {
    csv::Reader::from_path(path).map_err(|e| csv_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::Config(format!("{}: {other:?}", path.display())),
    }
}

fn parse<T: std::str::FromStr>(path: &Path, field: &str, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{}: bad value '{s}' in column {field}", path.display())))
}

fn parse_opt(path: &Path, field: &str, s: &str) -> Result<Option<f64>> {
    if s.trim().is_empty() {
        Ok(None)
    } else {
        parse(path, field, s).map(Some)
    }
}

fn check_header(path: &Path, got: &csv::StringRecord, want: &[String]) -> Result<()> {
    if got.iter().ne(want.iter().map(String::as_str)) {
        return Err(CliError::Config(format!(
            "{}: unexpected header {:?}, expected {:?}",
            path.display(),
            got.iter().collect::<Vec<_>>(),
            want
        )));
    }
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(path, e.into()))?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// One row of `trajectory.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub iter: usize,
    pub losses: Vec<f64>,
    pub dir_norm: f64,
    pub lr: f64,
    pub fwd: u64,
    pub bwd: u64,
}

fn trajectory_header(k: usize) -> Vec<String> {
    let mut h = vec!["iter".to_string()];
    h.extend((1..=k).map(|i| format!("loss_{i}")));
    h.extend(["dir_norm", "lr", "fwd", "bwd"].map(String::from));
    h
}

pub fn write_trajectory(path: &Path, num_tasks: usize, traj: &Trajectory) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(trajectory_header(num_tasks)).map_err(|e| csv_err(path, e))?;
    for r in &traj.records {
        let mut row = vec![r.iteration.to_string()];
        row.extend(r.losses.iter().map(|&l| real(l)));
        row.push(real(r.dir_norm));
        row.push(real(r.lr));
        row.push(r.passes.forwards.to_string());
        row.push(r.passes.backwards.to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRow>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.len().saturating_sub(5);
    check_header(path, &header, &trajectory_header(k))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        rows.push(TrajectoryRow {
            iter: parse(path, "iter", &rec[0])?,
            losses: (0..k)
                .map(|i| parse(path, &header[i + 1], &rec[i + 1]))
                .collect::<Result<_>>()?,
            dir_norm: parse(path, "dir_norm", &rec[k + 1])?,
            lr: parse(path, "lr", &rec[k + 2])?,
            fwd: parse(path, "fwd", &rec[k + 3])?,
            bwd: parse(path, "bwd", &rec[k + 4])?,
        });
    }
    Ok(rows)
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Summary {
    pub seed: u64,
    pub steps: usize,
    pub steps_completed: usize,
    /// Failure message when the run aborted.
    pub aborted: Option<String>,
    pub final_losses: Option<Vec<f64>>,
    pub mean_final_loss: Option<f64>,
    /// `‖∇l₀‖` at the final iterate.
    pub final_grad_norm: Option<f64>,
    /// Mean off-diagonal cosine of the task gradients over shared layers at
    /// the final iterate.
    pub final_mean_cosine: Option<f64>,
    pub delta_m: Option<f64>,
    /// Passes spent on updates (logging evaluations excluded).
    pub passes: PassCount,
    pub lambda_max: Option<f64>,
    pub config: ExperimentConfig,
}

fn cosine_header(k: usize) -> Vec<String> {
    let mut h = vec!["task".to_string()];
    h.extend((1..=k).map(|i| format!("cos_{i}")));
    h.push("degenerate".into());
    h
}

pub fn cosine_file_name(iteration: usize) -> String {
    format!("cosine_{iteration}.csv")
}

pub fn write_cosine(path: &Path, m: &CosineMatrix) -> Result<()> {
    let k = m.values.len();
    let mut w = csv_writer(path)?;
    w.write_record(cosine_header(k)).map_err(|e| csv_err(path, e))?;
    for (i, row) in m.values.iter().enumerate() {
        let mut rec = vec![(i + 1).to_string()];
        rec.extend(row.iter().map(|&c| real(c)));
        rec.push(m.degenerate[i].to_string());
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_cosine(path: &Path) -> Result<CosineMatrix> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.len().saturating_sub(2);
    check_header(path, &header, &cosine_header(k))?;
    let mut values = Vec::with_capacity(k);
    let mut degenerate = Vec::with_capacity(k);
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        values.push(
            (0..k)
                .map(|j| parse(path, &header[j + 1], &rec[j + 1]))
                .collect::<Result<Vec<f64>>>()?,
        );
        degenerate.push(parse(path, "degenerate", &rec[k + 1])?);
    }
    Ok(CosineMatrix { values, degenerate })
}

const GRID_HEADER: [&str; 4] = ["x1", "x2", "f1", "f2"];

pub fn write_grid(path: &Path, grid: &[GridPoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(GRID_HEADER).map_err(|e| csv_err(path, e))?;
    for p in grid {
        w.write_record([real(p.x1), real(p.x2), real(p.f1), real(p.f2)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_grid(path: &Path) -> Result<Vec<GridPoint>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &GRID_HEADER.map(String::from))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            Ok(GridPoint {
                x1: parse(path, "x1", &rec[0])?,
                x2: parse(path, "x2", &rec[1])?,
                f1: parse(path, "f1", &rec[2])?,
                f2: parse(path, "f2", &rec[3])?,
            })
        })
        .collect()
}

/// One row of a toy trajectory: the iterate and both objectives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyRow {
    pub iter: usize,
    pub x1: f64,
    pub x2: f64,
    pub f1: f64,
    pub f2: f64,
}

const TOY_HEADER: [&str; 5] = ["iter", "x1", "x2", "f1", "f2"];

pub fn write_toy_trajectory(path: &Path, rows: &[ToyRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TOY_HEADER).map_err(|e| csv_err(path, e))?;
    for p in rows {
        w.write_record([p.iter.to_string(), real(p.x1), real(p.x2), real(p.f1), real(p.f2)])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_toy_trajectory(path: &Path) -> Result<Vec<ToyRow>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &TOY_HEADER.map(String::from))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            Ok(ToyRow {
                iter: parse(path, "iter", &rec[0])?,
                x1: parse(path, "x1", &rec[1])?,
                x2: parse(path, "x2", &rec[2])?,
                f1: parse(path, "f1", &rec[3])?,
                f2: parse(path, "f2", &rec[4])?,
            })
        })
        .collect()
}

/// One row of `toy_figure_summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyFigureRow {
    pub method: String,
    pub x1: f64,
    pub x2: f64,
    pub f1: f64,
    pub f2: f64,
    pub grad_norm: f64,
    pub lambda_max: f64,
}

const TOY_FIGURE_HEADER: [&str; 7] = ["method", "x1", "x2", "f1", "f2", "grad_norm", "lambda_max"];

pub fn write_toy_figure_summary(path: &Path, rows: &[ToyFigureRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(TOY_FIGURE_HEADER).map_err(|e| csv_err(path, e))?;
    for p in rows {
        w.write_record([
            p.method.clone(),
            real(p.x1),
            real(p.x2),
            real(p.f1),
            real(p.f2),
            real(p.grad_norm),
            real(p.lambda_max),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_toy_figure_summary(path: &Path) -> Result<Vec<ToyFigureRow>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    check_header(path, &header, &TOY_FIGURE_HEADER.map(String::from))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            Ok(ToyFigureRow {
                method: rec[0].to_string(),
                x1: parse(path, "x1", &rec[1])?,
                x2: parse(path, "x2", &rec[2])?,
                f1: parse(path, "f1", &rec[3])?,
                f2: parse(path, "f2", &rec[4])?,
                grad_norm: parse(path, "grad_norm", &rec[5])?,
                lambda_max: parse(path, "lambda_max", &rec[6])?,
            })
        })
        .collect()
}

/// One row of `sweep_summary.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub index: usize,
    pub axis: String,
    pub value: f64,
    pub seed: u64,
    /// `ok` or `aborted`.
    pub status: String,
    pub steps_completed: usize,
    pub final_losses: Option<Vec<f64>>,
    pub mean_loss: Option<f64>,
    pub grad_norm: Option<f64>,
    /// Mean off-diagonal cosine of the task gradients at the final iterate.
    pub mean_cosine: Option<f64>,
    pub lambda_max: Option<f64>,
    pub delta_m: Option<f64>,
}

fn sweep_header(k: usize) -> Vec<String> {
    let mut h: Vec<String> = ["index", "axis", "value", "seed", "status", "steps_completed"]
        .map(String::from)
        .to_vec();
    h.extend((1..=k).map(|i| format!("loss_{i}")));
    h.extend(["mean_loss", "grad_norm", "mean_cosine", "lambda_max", "delta_m"].map(String::from));
    h
}

pub fn write_sweep_summary(path: &Path, num_tasks: usize, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(sweep_header(num_tasks)).map_err(|e| csv_err(path, e))?;
    for s in rows {
        let mut rec = vec![
            s.index.to_string(),
            s.axis.clone(),
            real(s.value),
            s.seed.to_string(),
            s.status.clone(),
            s.steps_completed.to_string(),
        ];
        match &s.final_losses {
            Some(l) => rec.extend(l.iter().map(|&x| real(x))),
            None => rec.extend(std::iter::repeat_n(String::new(), num_tasks)),
        }
        rec.extend([s.mean_loss, s.grad_norm, s.mean_cosine, s.lambda_max, s.delta_m].map(opt_real));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_sweep_summary(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv_reader(path)?;
    let header = r.headers().map_err(|e| csv_err(path, e))?.clone();
    let k = header.len().saturating_sub(11);
    check_header(path, &header, &sweep_header(k))?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let losses: Vec<Option<f64>> = (0..k)
            .map(|i| parse_opt(path, &header[6 + i], &rec[6 + i]))
            .collect::<Result<_>>()?;
        let tail = |j: usize| parse_opt(path, &header[6 + k + j], &rec[6 + k + j]);
        rows.push(SweepRow {
            index: parse(path, "index", &rec[0])?,
            axis: rec[1].to_string(),
            value: parse(path, "value", &rec[2])?,
            seed: parse(path, "seed", &rec[3])?,
            status: rec[4].to_string(),
            steps_completed: parse(path, "steps_completed", &rec[5])?,
            final_losses: losses.into_iter().collect(),
            mean_loss: tail(0)?,
            grad_norm: tail(1)?,
            mean_cosine: tail(2)?,
            lambda_max: tail(3)?,
            delta_m: tail(4)?,
        });
    }
    Ok(rows)
}
