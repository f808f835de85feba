use std::fs;
use std::path::Path;

use ope_core::experiment::{run_experiment, ExperimentConfig, RUNS_FILE, SIDECAR_FILE, SUMMARY_FILE};
use ope_core::OpeError;

fn config(out: &Path, n_grid: &[usize], t_grid: &[usize], repeats: usize, workers: usize) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        "n_grid = {n_grid:?}\nt_grid = {t_grid:?}\nrepeats = {repeats}\nbase_seed = 42\n\
         mc_rollouts = 2000\nworkers = {workers}\noutput_path = {:?}\n",
        out.display().to_string()
    ))
    .unwrap()
}

/// Run rows with the wall-time column removed.
fn result_columns(dir: &Path) -> Vec<String> {
    let text = fs::read_to_string(dir.join(RUNS_FILE)).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let skip = header.iter().position(|h| *h == "wall_time_seconds").unwrap();
    text.lines()
        .map(|l| {
            l.split(',')
                .enumerate()
                .filter(|(i, _)| *i != skip)
                .map(|(_, v)| v)
                .collect::<Vec<_>>()
                .join(",")
        })
        .collect()
}

#[test]
fn single_cell_produces_one_record_and_one_summary_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(dir.path(), &[50], &[1], 1, 1)).unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(out.summary.len(), 1);
    let r = &out.records[0];
    assert_eq!(r.abs_error, (r.value_estimate - r.oracle_value).abs());
    assert_eq!(out.summary[0].mae, r.abs_error);
    let runs = fs::read_to_string(dir.path().join(RUNS_FILE)).unwrap();
    assert_eq!(
        runs.lines().next().unwrap(),
        "n,T,repeat_index,seed,value_estimate,oracle_value,abs_error,wall_time_seconds,per_step_scales"
    );
    assert_eq!(runs.lines().count(), 2);
    let summary = fs::read_to_string(dir.path().join(SUMMARY_FILE)).unwrap();
    assert_eq!(
        summary.lines().next().unwrap(),
        "n,T,repeats,MAE,se,loglog_slope_vs_T,loglog_slope_vs_n"
    );
    let sidecar: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join(SIDECAR_FILE)).unwrap()).unwrap();
    assert_eq!(sidecar["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(sidecar["config"]["n_grid"][0], 50);
}

#[test]
fn outputs_do_not_depend_on_worker_count_or_rerun() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    let out = run_experiment(&config(a.path(), &[50, 60], &[1, 2], 3, 1)).unwrap();
    run_experiment(&config(b.path(), &[50, 60], &[1, 2], 3, 4)).unwrap();
    run_experiment(&config(c.path(), &[50, 60], &[1, 2], 3, 1)).unwrap();
    assert_eq!(out.records.len(), 12);
    assert_eq!(result_columns(a.path()), result_columns(b.path()));
    assert_eq!(result_columns(a.path()), result_columns(c.path()));
    assert_eq!(
        fs::read(a.path().join(SUMMARY_FILE)).unwrap(),
        fs::read(c.path().join(SUMMARY_FILE)).unwrap()
    );
    let seeds: std::collections::HashSet<u64> = out.records.iter().map(|r| r.seed).collect();
    assert_eq!(seeds.len(), 12);
    for row in &out.summary {
        let errs: Vec<f64> = out
            .records
            .iter()
            .filter(|r| r.n == row.n && r.horizon == row.horizon)
            .map(|r| r.abs_error)
            .collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        assert!((row.mae - mean).abs() <= 1e-12);
        assert!(row.loglog_slope_vs_n.is_some() && row.loglog_slope_vs_t.is_some());
    }
}

#[test]
fn unwritable_output_fails_before_compute() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    // a huge grid that would take very long if any compute started
    let cfg = config(&blocker.join("out"), &[100_000], &[50], 1000, 1);
    let err = run_experiment(&cfg).unwrap_err();
    assert!(matches!(err, OpeError::Io(_)), "{err}");
}
