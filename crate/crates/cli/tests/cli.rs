//! Drives the `samo` binary and the command layer against temporary
//! directories and reads every output file back.

use std::path::Path;
use std::process::Command;

use samo_cli::commands::{cmd_run, cmd_sweep, cmd_toy_figure, SweepAxis, ToyFigureOptions};
use samo_cli::config::OUTPUT_ROOT_ENV;
use samo_cli::output::{self, Summary};
use samo_cli::ExperimentConfig;
use samo_core::diagnostics::SpectrumReport;
use samo_core::LayeredParams;

fn samo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_samo"))
}

fn mlp_config(dir: &Path, extra: &str) -> String {
    format!(
        r#"{{"problem": {{"kind": "mlp", "params": {{"seed": 2, "tasks": 3, "n_samples": 40}}}},
            "optimizer": {{"lr": 0.05, "steps": 12, "record_every": 3}},
            "diagnostics": {{"cosine_every": 6, "spectrum_at_end": true, "k": 3}},
            "baselines": [{{"value": 0.5}}, {{"value": 0.5}}, {{"value": 0.5}}],
            "output_dir": "{}"{extra}}}"#,
        dir.display()
    )
}

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn run_writes_every_artifact_and_they_read_back() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let cfg = ExperimentConfig::from_json(&mlp_config(&out, "")).unwrap();
    let outcome = cmd_run(&cfg).unwrap();
    assert!(!outcome.aborted());

    let rows = output::read_trajectory(&out.join(output::TRAJECTORY_FILE)).unwrap();
    assert_eq!(rows.iter().map(|r| r.iter).collect::<Vec<_>>(), vec![0, 3, 6, 9, 11]);
    assert!(rows.iter().all(|r| r.losses.len() == 3 && r.fwd == 6 && r.bwd == 4));

    let summary: Summary = output::read_json(&out.join(output::SUMMARY_FILE)).unwrap();
    assert_eq!(summary, outcome.summary);
    assert_eq!(summary.steps_completed, 12);
    assert_eq!((summary.passes.forwards, summary.passes.backwards), (72, 48));
    assert!(summary.delta_m.is_some() && summary.lambda_max.is_some());
    assert_eq!(summary.config, cfg);

    let params: LayeredParams = output::read_json(&out.join(output::PARAMS_FILE)).unwrap();
    assert_eq!(Some(params), outcome.final_params);

    let spectrum: SpectrumReport = output::read_json(&out.join(output::SPECTRUM_FILE)).unwrap();
    assert_eq!(spectrum.eigenvalues.len(), 3);
    assert_eq!(Some(spectrum.lambda_max), summary.lambda_max);

    for t in [0, 6] {
        let m = output::read_cosine(&out.join(output::cosine_file_name(t))).unwrap();
        assert_eq!(m.values.len(), 3);
        assert!(m.values.iter().enumerate().all(|(i, row)| (row[i] - 1.0).abs() < 1e-12));
    }
    assert!(out.join(output::DATASET_FILE).exists());
}

#[test]
fn generated_dataset_reloads_into_the_same_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("first");
    cmd_run(&ExperimentConfig::from_json(&mlp_config(&first, "")).unwrap()).unwrap();

    let second = tmp.path().join("second");
    let mut cfg = ExperimentConfig::from_json(&mlp_config(&second, "")).unwrap();
    if let samo_cli::config::ProblemSpec::Mlp { dataset, .. } = &mut cfg.problem {
        *dataset = Some(first.join(output::DATASET_FILE));
    }
    cmd_run(&cfg).unwrap();
    let a = std::fs::read(first.join(output::TRAJECTORY_FILE)).unwrap();
    let b = std::fs::read(second.join(output::TRAJECTORY_FILE)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn binary_run_succeeds_and_honours_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &mlp_config(&tmp.path().join("ignored"), ""));
    let out = tmp.path().join("override");
    let status = samo()
        .arg("run")
        .arg(&cfg)
        .args(["--steps", "4", "--seed", "9", "--weighting", "mgda", "--output-dir"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success());
    let summary: Summary = output::read_json(&out.join(output::SUMMARY_FILE)).unwrap();
    assert_eq!((summary.steps, summary.seed), (4, 9));
    assert_eq!(summary.config.weighting, "mgda");
    assert!(!tmp.path().join("ignored").exists());
}

#[test]
fn configuration_errors_exit_with_code_two() {
    let tmp = tempfile::tempdir().unwrap();
    for (name, text) in [
        ("alpha", r#"{"sam": {"alpha": 1.3}}"#),
        ("unknown", r#"{"optimiser": {}}"#),
        ("weighting", r#"{"weighting": "nope"}"#),
        ("syntax", "{"),
    ] {
        let dir = tmp.path().join(name);
        std::fs::create_dir(&dir).unwrap();
        let cfg = write_config(&dir, text);
        let out = samo().arg("run").arg(&cfg).arg("--output-dir").arg(dir.join("o")).output().unwrap();
        assert_eq!(out.status.code(), Some(2), "{name}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!dir.join("o").exists(), "{name}");
    }

    // an override can also make a valid file invalid
    let cfg = write_config(tmp.path(), "{}");
    let out = samo().arg("run").arg(&cfg).args(["--lr", "-1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let missing = samo().arg("run").arg(tmp.path().join("absent.json")).output().unwrap();
    assert_eq!(missing.status.code(), Some(2));
}

#[test]
fn a_divergent_run_exits_with_code_three_and_keeps_partial_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("boom");
    let text = format!(
        r#"{{"problem": {{"kind": "mlp", "params": {{"seed": 1, "n_samples": 32}}}},
            "sam": {{"mode": "off"}},
            "optimizer": {{"lr": 1e150, "steps": 50, "schedule": "constant"}},
            "output_dir": "{}"}}"#,
        out.display()
    );
    let cfg = write_config(tmp.path(), &text);
    let status = samo().arg("run").arg(&cfg).status().unwrap();
    assert_eq!(status.code(), Some(3));
    let summary: Summary = output::read_json(&out.join(output::SUMMARY_FILE)).unwrap();
    assert!(summary.aborted.is_some());
    assert!(summary.steps_completed < 50);
    let last: LayeredParams = output::read_json(&out.join(output::LAST_GOOD_FILE)).unwrap();
    assert!(last.is_finite());
    assert!(out.join(output::TRAJECTORY_FILE).exists());
    assert!(!out.join(output::PARAMS_FILE).exists());
}

#[test]
fn sweeps_write_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().join("sweep");
    let mut base = ExperimentConfig::from_json(&mlp_config(&root, "")).unwrap();
    base.diagnostics.spectrum_at_end = false;
    base.optimizer.steps = 5;
    for (axis, values) in [
        (SweepAxis::Alpha, vec![0.1, 0.5, 0.9]),
        (SweepAxis::Rho, vec![1e-4, 1e-3, 1e-2]),
    ] {
        let rows = cmd_sweep(&base, axis, &values, false).unwrap();
        let back = output::read_sweep_summary(&root.join(output::SWEEP_SUMMARY_FILE)).unwrap();
        assert_eq!(rows, back);
        assert_eq!(back.len(), 3);
        for (i, r) in back.iter().enumerate() {
            assert_eq!((r.index, r.value, r.axis.as_str()), (i, values[i], axis.name()));
            assert_eq!(r.seed, base.optimizer.seed + i as u64);
            assert_eq!(r.status, "ok");
            let summary: Summary =
                output::read_json(&root.join(format!("{}_{i:02}", axis.name())).join(output::SUMMARY_FILE)).unwrap();
            assert_eq!(summary.final_losses, r.final_losses);
        }
    }
    assert!(cmd_sweep(&base, SweepAxis::Mu, &[], false).is_err());
}

#[test]
fn binary_sweep_rejects_bad_values() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &mlp_config(&tmp.path().join("s"), ""));
    let bad_axis = samo().arg("sweep").arg(&cfg).args(["--axis", "beta", "--values", "1"]).output().unwrap();
    assert_eq!(bad_axis.status.code(), Some(2));
    let bad_value = samo().arg("sweep").arg(&cfg).args(["--axis", "alpha", "--values", "0.2,x"]).output().unwrap();
    assert_eq!(bad_value.status.code(), Some(2));
    let out_of_range = samo().arg("sweep").arg(&cfg).args(["--axis", "alpha", "--values", "2"]).output().unwrap();
    assert_eq!(out_of_range.status.code(), Some(2));
}

#[test]
fn toy_figure_files_read_back() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fig");
    let opts = ToyFigureOptions {
        steps: 40,
        resolution: 11,
        ..ToyFigureOptions::default()
    };
    let methods = ["ls".to_string(), "mgda+samo".to_string()];
    let rows = cmd_toy_figure(&out, &methods, &opts).unwrap();
    assert_eq!(output::read_toy_figure_summary(&out.join(output::TOY_FIGURE_SUMMARY_FILE)).unwrap(), rows);
    assert_eq!(rows.iter().map(|r| r.method.as_str()).collect::<Vec<_>>(), ["ls", "mgda+samo"]);

    let grid = output::read_grid(&out.join(output::GRID_FILE)).unwrap();
    assert_eq!(grid.len(), 121);
    for file in ["traj_ls.csv", "traj_mgda_samo.csv"] {
        let traj = output::read_toy_trajectory(&out.join(file)).unwrap();
        assert_eq!((traj[0].x1, traj[0].x2), (-6.0, 1.0));
        assert_eq!(traj.last().unwrap().iter, 40);
    }
}

#[test]
fn binary_toy_figure_and_spectrum() {
    let tmp = tempfile::tempdir().unwrap();
    let fig = tmp.path().join("fig");
    let status = samo()
        .args(["toy-figure", "--steps", "20", "--resolution", "5", "--methods", "ls,pcgrad+lsam", "--out"])
        .arg(&fig)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(fig.join("traj_pcgrad_lsam.csv").exists());
    let bad = samo().args(["toy-figure", "--methods", "ls+xsam", "--out"]).arg(&fig).output().unwrap();
    assert_eq!(bad.status.code(), Some(2));

    let run_dir = tmp.path().join("run");
    let cfg_text = mlp_config(&run_dir, "");
    let cfg = write_config(tmp.path(), &cfg_text);
    assert!(samo().arg("run").arg(&cfg).status().unwrap().success());
    let report = tmp.path().join("spectrum.json");
    let status = samo()
        .args(["spectrum", "--k", "2", "--config"])
        .arg(&cfg)
        .arg("--params")
        .arg(run_dir.join(output::PARAMS_FILE))
        .arg("--out")
        .arg(&report)
        .status()
        .unwrap();
    assert!(status.success());
    let r: SpectrumReport = output::read_json(&report).unwrap();
    assert_eq!(r.eigenvalues.len(), 2);

    // parameters from a different problem are rejected
    let toy_cfg = write_config(&fig, r#"{"problem": {"kind": "toy"}}"#);
    let mismatch = samo()
        .args(["spectrum", "--config"])
        .arg(&toy_cfg)
        .arg("--params")
        .arg(run_dir.join(output::PARAMS_FILE))
        .output()
        .unwrap();
    assert_eq!(mismatch.status.code(), Some(2));
}

#[test]
fn relative_output_directories_resolve_under_the_output_root() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        r#"{"problem": {"kind": "toy"}, "optimizer": {"steps": 3}, "output_dir": "nested/out"}"#,
    );
    let status = samo()
        .arg("run")
        .arg(&cfg)
        .env(OUTPUT_ROOT_ENV, tmp.path().join("root"))
        .current_dir(tmp.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(tmp.path().join("root/nested/out").join(output::SUMMARY_FILE).exists());
    assert!(!tmp.path().join("nested").exists());
}
