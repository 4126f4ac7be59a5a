use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use samo_cli::commands::{self, SweepAxis, ToyFigureOptions, DEFAULT_TOY_METHODS};
use samo_cli::config::resolve_output;
use samo_cli::{output, CliError, ExperimentConfig, Overrides};

/// Sharpness-aware multi-task optimization experiments.
///
/// Exit codes: 0 ok, 2 configuration error, 3 numeric failure.
/// Relative output directories resolve against $SAMO_OUTPUT_ROOT when set.
#[derive(Debug, Parser)]
#[command(name = "samo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct OverrideArgs {
    /// Replace `output_dir`.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replace `weighting` (ls, mgda, pcgrad).
    #[arg(long)]
    weighting: Option<String>,
    /// Replace `optimizer.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Replace `optimizer.steps`.
    #[arg(long)]
    steps: Option<usize>,
    /// Replace `optimizer.lr`.
    #[arg(long)]
    lr: Option<f64>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            output_dir: a.output_dir,
            weighting: a.weighting,
            seed: a.seed,
            steps: a.steps,
            lr: a.lr,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Write the toy landscape grid and one trajectory per method.
    ToyFigure {
        #[arg(long, default_value = "toy-figure")]
        out: PathBuf,
        /// Comma-separated `<weighting>[+gsam|+lsam|+samo]` names.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        rho: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// Grid nodes per axis.
        #[arg(long)]
        resolution: Option<usize>,
    },
    /// One run per value of a config parameter.
    Sweep {
        config: PathBuf,
        /// alpha, rho, mu, lr or conflict_angle.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        values: Vec<String>,
        /// Run the sub-runs concurrently.
        #[arg(long)]
        parallel: bool,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Hessian spectrum at a saved parameter snapshot.
    Spectrum {
        /// Config describing the problem the parameters belong to.
        #[arg(long)]
        config: PathBuf,
        /// A params.json written by `run`.
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(path: &PathBuf, overrides: OverrideArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    cfg.apply(&overrides.into());
    cfg.validate()?;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { config, overrides } => {
            let cfg = load(&config, overrides)?;
            let out = commands::cmd_run(&cfg)?;
            println!("output: {}", out.dir.display());
            if let Some(l) = out.summary.mean_final_loss {
                println!("mean final loss: {l:.6e}");
            }
            if let Some(msg) = out.summary.aborted {
                return Err(CliError::Numeric(msg));
            }
        }
        Command::ToyFigure {
            out,
            methods,
            steps,
            lr,
            momentum,
            rho,
            seed,
            resolution,
        } => {
            let d = ToyFigureOptions::default();
            let opts = ToyFigureOptions {
                steps: steps.unwrap_or(d.steps),
                lr: lr.unwrap_or(d.lr),
                momentum: momentum.unwrap_or(d.momentum),
                rho: rho.unwrap_or(d.rho),
                seed: seed.unwrap_or(d.seed),
                resolution: resolution.unwrap_or(d.resolution),
                ..d
            };
            let methods = if methods.is_empty() {
                DEFAULT_TOY_METHODS.map(String::from).to_vec()
            } else {
                methods
            };
            for row in commands::cmd_toy_figure(&out, &methods, &opts)? {
                println!(
                    "{}: ({:.4}, {:.4}) |grad| {:.3e} lambda_max {:.4}",
                    row.method, row.x1, row.x2, row.grad_norm, row.lambda_max
                );
            }
            println!("output: {}", resolve_output(&out).display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            parallel,
            overrides,
        } => {
            let cfg = load(&config, overrides)?;
            let axis: SweepAxis = axis.parse()?;
            let values = values
                .iter()
                .map(|s| s.trim())
                .filter(|s| !s.is_empty())
                .map(|s| {
                    s.parse::<f64>()
                        .map_err(|_| CliError::Config(format!("sweep value '{s}' is not a number")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let rows = commands::cmd_sweep(&cfg, axis, &values, parallel)?;
            let dir = cfg.resolved_output_dir();
            println!("output: {}", dir.join(output::SWEEP_SUMMARY_FILE).display());
            if let Some(r) = rows.iter().find(|r| r.status != "ok") {
                return Err(CliError::Numeric(format!("sub-run {} ({}={}) aborted", r.index, r.axis, r.value)));
            }
        }
        Command::Spectrum {
            config,
            params,
            k,
            seed,
            out,
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            cfg.validate()?;
            let report = commands::cmd_spectrum(&cfg, &params, k, seed)?;
            match out {
                Some(path) => output::write_json(&path, &report)?,
                None => println!(
                    "{}",
                    serde_json::to_string_pretty(&report).expect("report serializes")
                ),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
