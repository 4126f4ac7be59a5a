//! Experiment configuration: one strict JSON document per run.

use std::path::{Path, PathBuf};

use samo_core::diagnostics::MetricSpec;
use samo_core::optimizer::OptimizerConfig;
use samo_core::problems::{Dataset, MlpConfig, MlpMultiTaskProblem, ToyProblem, TOY_START};
use samo_core::sam::{SamConfig, SamMode};
use samo_core::weighting::{self, WeightingMethod};
use samo_core::MultiTaskProblem;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Environment variable that relative output directories resolve against.
pub const OUTPUT_ROOT_ENV: &str = "SAMO_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    Toy {
        #[serde(default)]
        start: Option<[f64; 2]>,
    },
    Mlp {
        #[serde(default)]
        params: MlpConfig,
        /// Read the dataset from this CSV instead of generating it.
        #[serde(default)]
        dataset: Option<PathBuf>,
    },
}

impl Default for ProblemSpec {
    fn default() -> Self {
        ProblemSpec::Toy { start: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsConfig {
    /// Write a cosine matrix every n iterations; 0 disables.
    pub cosine_every: usize,
    pub spectrum_at_end: bool,
    /// Number of Hessian eigenvalues for the end-of-run spectrum.
    pub k: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        Self {
            cosine_every: 0,
            spectrum_at_end: false,
            k: 5,
        }
    }
}

/// Per-task baseline for the Δm% score of the final losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Baseline {
    #[serde(default)]
    pub name: String,
    pub value: f64,
    #[serde(default)]
    pub higher_is_better: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub problem: ProblemSpec,
    pub weighting: String,
    pub sam: SamConfig,
    pub optimizer: OptimizerConfig,
    pub output_dir: PathBuf,
    pub diagnostics: DiagnosticsConfig,
    /// One entry per task; enables Δm% in the summary.
    pub baselines: Option<Vec<Baseline>>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            problem: ProblemSpec::default(),
            weighting: "ls".into(),
            sam: SamConfig::default(),
            optimizer: OptimizerConfig::default(),
            output_dir: PathBuf::from("samo-out"),
            diagnostics: DiagnosticsConfig::default(),
            baselines: None,
        }
    }
}

/// Command-line overrides of config fields.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub weighting: Option<String>,
    pub seed: Option<u64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(format!("invalid config: {e}")))
    }

    /// Parse a config file. Call [`validate`](Self::validate) after applying
    /// any overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(w) = &o.weighting {
            self.weighting = w.clone();
        }
        if let Some(s) = o.seed {
            self.optimizer.seed = s;
        }
        if let Some(t) = o.steps {
            self.optimizer.steps = t;
        }
        if let Some(lr) = o.lr {
            self.optimizer.lr = lr;
        }
    }

    pub fn validate(&self) -> Result<()> {
        fn tag(section: &'static str) -> impl Fn(samo_core::Error) -> CliError {
            move |e| CliError::Config(format!("{section}: {e}"))
        }
        weighting::by_name(&self.weighting).map_err(tag("weighting"))?;
        if self.sam.mode != SamMode::Off {
            self.sam.validate().map_err(tag("sam"))?;
        }
        self.optimizer.validate().map_err(tag("optimizer"))?;
        if self.diagnostics.spectrum_at_end && self.diagnostics.k == 0 {
            return Err(CliError::Config("diagnostics.k must be at least 1".into()));
        }
        let (k, dim) = match &self.problem {
            ProblemSpec::Toy { .. } => (2, 2),
            ProblemSpec::Mlp { params, .. } => {
                if params.tasks == 0 || params.trunk_sizes.len() < 2 {
                    return Err(CliError::Config(
                        "problem.params: need at least one task and two trunk sizes".into(),
                    ));
                }
                let trunk: usize = params.trunk_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
                let feat = *params.trunk_sizes.last().expect("checked");
                (params.tasks, trunk + params.tasks * (feat + 1))
            }
        };
        if self.diagnostics.spectrum_at_end && self.diagnostics.k > dim {
            return Err(CliError::Config(format!(
                "diagnostics.k = {} exceeds the parameter dimension {dim}",
                self.diagnostics.k
            )));
        }
        if let Some(b) = &self.baselines {
            if b.len() != k {
                return Err(CliError::Config(format!(
                    "baselines: expected {k} entries (one per task), got {}",
                    b.len()
                )));
            }
            if let Some(z) = b.iter().position(|x| x.value == 0.0 || !x.value.is_finite()) {
                return Err(CliError::Config(format!("baselines[{z}]: value must be nonzero and finite")));
            }
        }
        Ok(())
    }

    /// Output directory with the output-root environment override applied.
    pub fn resolved_output_dir(&self) -> PathBuf {
        resolve_output(&self.output_dir)
    }

    pub fn weighting_method(&self) -> Result<Box<dyn WeightingMethod>> {
        weighting::by_name(&self.weighting).map_err(|e| CliError::Config(format!("weighting: {e}")))
    }

    pub fn build_problem(&self) -> Result<BuiltProblem> {
        match &self.problem {
            ProblemSpec::Toy { start } => Ok(BuiltProblem::Toy(ToyProblem::with_start(
                start.unwrap_or(TOY_START),
            ))),
            ProblemSpec::Mlp { params, dataset } => {
                let p = match dataset {
                    Some(path) => {
                        let data = Dataset::read_csv(path)
                            .map_err(|e| CliError::Config(format!("problem.dataset: {e}")))?;
                        MlpMultiTaskProblem::from_dataset(params.clone(), data)
                    }
                    None => MlpMultiTaskProblem::new(params.clone()),
                }
                .map_err(|e| CliError::Config(format!("problem.params: {e}")))?;
                Ok(BuiltProblem::Mlp(Box::new(p)))
            }
        }
    }

    /// Δm% inputs pairing each baseline with a final task loss.
    pub fn metric_specs(&self, final_losses: &[f64]) -> Option<Vec<MetricSpec>> {
        self.baselines.as_ref().map(|b| {
            b.iter()
                .zip(final_losses)
                .enumerate()
                .map(|(i, (b, &m))| MetricSpec {
                    name: if b.name.is_empty() { format!("task_{}", i + 1) } else { b.name.clone() },
                    baseline: b.value,
                    method: m,
                    higher_is_better: b.higher_is_better,
                })
                .collect()
        })
    }
}

pub fn resolve_output(dir: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(root) if dir.is_relative() && !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

pub enum BuiltProblem {
    Toy(ToyProblem),
    Mlp(Box<MlpMultiTaskProblem>),
}

impl BuiltProblem {
    pub fn as_problem(&self) -> &dyn MultiTaskProblem {
        match self {
            BuiltProblem::Toy(p) => p,
            BuiltProblem::Mlp(p) => p.as_ref(),
        }
    }
}
