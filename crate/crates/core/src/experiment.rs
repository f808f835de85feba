//! Configuration-driven sweeps over sample size and horizon.
//!
//! For every `(n, T)` cell the harness samples `repeats` independent batches,
//! runs the estimator on each, and compares with a Monte Carlo value of the
//! target policy. Outputs go to a directory:
//!
//! - `runs.csv`: one row per run, flushed after every cell;
//! - `summary.csv`: MAE, standard error and log-log slopes per cell;
//! - `run.json`: the resolved configuration, library version and oracle values.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{OpeError, Result};
use crate::fqe::{estimate_v_bridges, FqeSettings, MIN_SAMPLES_PER_FOLD};
use crate::npiv::log_spaced_pool;
use crate::seed::{child_seed, mix64};
use crate::simulator::{mc_policy_value, sample_batch, SimParams, TargetPolicy};

pub const RUNS_FILE: &str = "runs.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const SIDECAR_FILE: &str = "run.json";
/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "OPE_WORKERS";

const ORACLE_DOMAIN: u64 = 0x6f72_6163_6c65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Spacing {
    Log,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalePoolConfig {
    pub count: usize,
    pub lo: f64,
    pub hi: f64,
    pub spacing: Spacing,
}

impl Default for ScalePoolConfig {
    fn default() -> Self {
        ScalePoolConfig {
            count: 30,
            lo: 0.001,
            hi: 0.05,
            spacing: Spacing::Log,
        }
    }
}

impl ScalePoolConfig {
    pub fn values(&self) -> Result<Vec<f64>> {
        match self.spacing {
            Spacing::Log => log_spaced_pool(self.count, self.lo, self.hi),
        }
    }
}

fn default_folds() -> usize {
    5
}

fn default_mc_rollouts() -> usize {
    50_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n_grid: Vec<usize>,
    pub t_grid: Vec<usize>,
    pub repeats: usize,
    pub base_seed: u64,
    #[serde(default)]
    pub scale_pool: ScalePoolConfig,
    #[serde(default = "default_folds")]
    pub folds: usize,
    #[serde(default = "default_mc_rollouts")]
    pub mc_rollouts: usize,
    /// Simulator parameters; any field left out keeps its default.
    #[serde(default)]
    pub sim_overrides: SimParams,
    /// Output directory.
    pub output_path: PathBuf,
    /// Worker threads; `None` uses all cores. `OPE_WORKERS` caps either choice.
    #[serde(default)]
    pub workers: Option<usize>,
    /// Directory for oracle values persisted across invocations.
    #[serde(default)]
    pub oracle_cache_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| OpeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| OpeError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig::from_toml_str(&text).map_err(|e| e.context(path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(OpeError::Config(m));
        if self.n_grid.is_empty() || self.t_grid.is_empty() {
            return bad("n_grid and t_grid must be non-empty".into());
        }
        if let Some(&n) = self.n_grid.iter().find(|&&n| n == 0 || n >= 1 << 24) {
            return bad(format!("n_grid value {n} outside [1, 2^24)"));
        }
        if let Some(&t) = self.t_grid.iter().find(|&&t| t == 0 || t >= 1 << 16) {
            return bad(format!("t_grid value {t} outside [1, 2^16)"));
        }
        if self.repeats == 0 || self.repeats >= 1 << 24 {
            return bad(format!("repeats = {} outside [1, 2^24)", self.repeats));
        }
        if self.folds < 2 {
            return bad(format!("folds = {} must be at least 2", self.folds));
        }
        if let Some(&n) = self.n_grid.iter().find(|&&n| n < MIN_SAMPLES_PER_FOLD * self.folds) {
            return bad(format!(
                "n = {n} is too small for {} folds (need {} per fold)",
                self.folds, MIN_SAMPLES_PER_FOLD
            ));
        }
        if self.mc_rollouts == 0 {
            return bad("mc_rollouts must be at least 1".into());
        }
        if self.workers == Some(0) {
            return bad("workers must be at least 1".into());
        }
        self.scale_pool.values().map_err(|e| OpeError::Config(format!("scale_pool: {e}")))?;
        self.sim_overrides
            .validate()
            .map_err(|e| OpeError::Config(format!("sim_overrides: {e}")))?;
        Ok(())
    }

    /// Grid values in ascending order without duplicates.
    fn sorted_grids(&self) -> (Vec<usize>, Vec<usize>) {
        let mut n = self.n_grid.clone();
        n.sort_unstable();
        n.dedup();
        let mut t = self.t_grid.clone();
        t.sort_unstable();
        t.dedup();
        (n, t)
    }
}

/// Seed for run `repeat` of cell `(n, T)`. Injective in `(n, T, repeat)` for a
/// fixed base seed while `n < 2^24`, `T < 2^16` and `repeat < 2^24`.
pub fn derive_run_seed(base_seed: u64, n: usize, horizon: usize, repeat: usize) -> u64 {
    let packed = ((n as u64) << 40) | ((horizon as u64) << 24) | repeat as u64;
    mix64(packed ^ mix64(base_seed))
}

/// Seed of the oracle rollouts for horizon `T`.
pub fn oracle_seed(base_seed: u64, horizon: usize) -> u64 {
    child_seed(base_seed ^ ORACLE_DOMAIN, horizon as u64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleValue {
    #[serde(rename = "T")]
    pub horizon: usize,
    pub value: f64,
    pub se: f64,
    pub rollouts: usize,
    pub seed: u64,
    pub key: String,
}

/// Content hash of everything the oracle value depends on.
pub fn oracle_key(params: &SimParams, horizon: usize, rollouts: usize, seed: u64) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(params)?);
    h.update((horizon as u64).to_le_bytes());
    h.update((rollouts as u64).to_le_bytes());
    h.update(seed.to_le_bytes());
    Ok(hex::encode(h.finalize()))
}

/// Oracle values memoized in memory and, optionally, as JSON files on disk.
#[derive(Debug, Default)]
pub struct OracleCache {
    dir: Option<PathBuf>,
    memo: HashMap<String, OracleValue>,
}

impl OracleCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        OracleCache {
            dir,
            memo: HashMap::new(),
        }
    }

    pub fn get_or_compute(&mut self, params: &SimParams, horizon: usize, rollouts: usize, seed: u64) -> Result<OracleValue> {
        let key = oracle_key(params, horizon, rollouts, seed)?;
        if let Some(v) = self.memo.get(&key) {
            return Ok(v.clone());
        }
        let file = self.dir.as_ref().map(|d| d.join(format!("{key}.json")));
        if let Some(path) = file.as_ref().filter(|p| p.exists()) {
            let v: OracleValue = serde_json::from_str(&fs::read_to_string(path)?)?;
            if v.key == key {
                self.memo.insert(key, v.clone());
                return Ok(v);
            }
        }
        let (value, se) = mc_policy_value(params, horizon, rollouts, seed)?;
        let v = OracleValue {
            horizon,
            value,
            se,
            rollouts,
            seed,
            key: key.clone(),
        };
        if let (Some(dir), Some(path)) = (self.dir.as_ref(), file) {
            fs::create_dir_all(dir)?;
            fs::write(path, serde_json::to_string_pretty(&v)?)?;
        }
        self.memo.insert(key, v.clone());
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub repeat_index: usize,
    pub seed: u64,
    pub value_estimate: f64,
    pub oracle_value: f64,
    pub abs_error: f64,
    pub wall_time_seconds: f64,
    /// Selected scales for `t = 1..=T`, `;`-separated.
    pub per_step_scales: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub n: usize,
    #[serde(rename = "T")]
    pub horizon: usize,
    pub repeats: usize,
    #[serde(rename = "MAE")]
    pub mae: f64,
    /// Sample standard deviation over `sqrt(repeats)`; absent for a single repeat.
    pub se: Option<f64>,
    /// Slope of log MAE on log T across the rows sharing this `n`.
    #[serde(rename = "loglog_slope_vs_T")]
    pub loglog_slope_vs_t: Option<f64>,
    /// Slope of log MAE on log n across the rows sharing this `T`.
    pub loglog_slope_vs_n: Option<f64>,
}

/// Least-squares slope of `log y` on `log x`. `None` with fewer than two
/// distinct `x` or any non-positive value.
pub fn loglog_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.iter().any(|&(x, y)| !(x > 0.0 && y > 0.0 && x.is_finite() && y.is_finite())) {
        return None;
    }
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let m = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / m;
    let my = ly.iter().sum::<f64>() / m;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    if points.len() < 2 || sxx <= 0.0 {
        return None;
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Some(sxy / sxx)
}

/// Per-cell MAE and standard error plus log-log slopes, ordered by `(n, T)`.
pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut cells: Vec<((usize, usize), Vec<f64>)> = Vec::new();
    let mut index: HashMap<(usize, usize), usize> = HashMap::new();
    for r in records {
        let key = (r.n, r.horizon);
        let i = *index.entry(key).or_insert_with(|| {
            cells.push((key, Vec::new()));
            cells.len() - 1
        });
        cells[i].1.push(r.abs_error);
    }
    cells.sort_by_key(|c| c.0);

    let mut rows: Vec<SummaryRow> = cells
        .iter()
        .map(|((n, t), errs)| {
            let m = errs.len() as f64;
            let mae = errs.iter().sum::<f64>() / m;
            let se = (errs.len() > 1).then(|| {
                let var = errs.iter().map(|e| (e - mae) * (e - mae)).sum::<f64>() / (m - 1.0);
                (var / m).sqrt()
            });
            SummaryRow {
                n: *n,
                horizon: *t,
                repeats: errs.len(),
                mae,
                se,
                loglog_slope_vs_t: None,
                loglog_slope_vs_n: None,
            }
        })
        .collect();

    let snapshot: Vec<(usize, usize, f64)> = rows.iter().map(|r| (r.n, r.horizon, r.mae)).collect();
    for row in &mut rows {
        let vs_t: Vec<(f64, f64)> = snapshot
            .iter()
            .filter(|c| c.0 == row.n)
            .map(|c| (c.1 as f64, c.2))
            .collect();
        let vs_n: Vec<(f64, f64)> = snapshot
            .iter()
            .filter(|c| c.1 == row.horizon)
            .map(|c| (c.0 as f64, c.2))
            .collect();
        row.loglog_slope_vs_t = loglog_slope(&vs_t);
        row.loglog_slope_vs_n = loglog_slope(&vs_n);
    }
    rows
}

pub fn read_records(path: &Path) -> Result<Vec<RunRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    rdr.deserialize().map(|r| r.map_err(OpeError::from)).collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct Sidecar<'a> {
    library: &'static str,
    version: &'static str,
    config: &'a ExperimentConfig,
    oracle: &'a [OracleValue],
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RunRecord>,
    pub summary: Vec<SummaryRow>,
    pub oracle: Vec<OracleValue>,
    pub runs_path: PathBuf,
    pub summary_path: PathBuf,
    pub sidecar_path: PathBuf,
}

/// Worker count after applying the `OPE_WORKERS` cap.
pub fn effective_workers(requested: Option<usize>) -> usize {
    let available = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let base = requested.unwrap_or(available).max(1);
    match std::env::var(WORKERS_ENV).ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap >= 1 => base.min(cap),
        _ => base,
    }
}

/// One estimator run on a freshly sampled batch.
pub fn run_once(
    config: &ExperimentConfig,
    scale_pool: &[f64],
    n: usize,
    horizon: usize,
    repeat: usize,
    oracle_value: f64,
) -> Result<RunRecord> {
    let params = &config.sim_overrides;
    let seed = derive_run_seed(config.base_seed, n, horizon, repeat);
    let started = Instant::now();
    let batch = sample_batch(params, n, horizon, child_seed(seed, 0))?;
    let policy = TargetPolicy::new(params);
    let settings = FqeSettings::cross_validated(scale_pool.to_vec(), config.folds, child_seed(seed, 1));
    let res = estimate_v_bridges(&batch, &policy, &settings)
        .map_err(|e| e.context(format!("n={n}, T={horizon}, repeat={repeat}")))?;
    let scales: Vec<String> = res.selected_scales().iter().map(|s| s.to_string()).collect();
    Ok(RunRecord {
        n,
        horizon,
        repeat_index: repeat,
        seed,
        value_estimate: res.value_estimate,
        oracle_value,
        abs_error: (res.value_estimate - oracle_value).abs(),
        wall_time_seconds: started.elapsed().as_secs_f64(),
        per_step_scales: scales.join(";"),
    })
}

/// Progress events emitted while a sweep runs.
#[derive(Debug, Clone)]
pub enum Progress<'a> {
    Oracle(&'a OracleValue),
    Cell { n: usize, horizon: usize, records: &'a [RunRecord] },
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    run_experiment_with_progress(config, |_| {})
}

pub fn run_experiment_with_progress(
    config: &ExperimentConfig,
    mut progress: impl FnMut(Progress<'_>),
) -> Result<ExperimentOutput> {
    config.validate()?;
    let dir = &config.output_path;
    fs::create_dir_all(dir).map_err(|e| io_context(e, dir))?;
    let runs_path = dir.join(RUNS_FILE);
    let summary_path = dir.join(SUMMARY_FILE);
    let sidecar_path = dir.join(SIDECAR_FILE);
    let runs_file = File::create(&runs_path).map_err(|e| io_context(e, &runs_path))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(runs_file));

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(effective_workers(config.workers))
        .build()
        .map_err(|e| OpeError::NumericalFailure(format!("thread pool: {e}")))?;
    let params = &config.sim_overrides;
    let scale_pool = config.scale_pool.values()?;
    let (n_grid, t_grid) = config.sorted_grids();

    let mut cache = OracleCache::new(config.oracle_cache_dir.clone());
    let mut oracle = Vec::with_capacity(t_grid.len());
    for &t in &t_grid {
        let v = pool.install(|| cache.get_or_compute(params, t, config.mc_rollouts, oracle_seed(config.base_seed, t)))?;
        progress(Progress::Oracle(&v));
        oracle.push(v);
    }

    let mut records = Vec::new();
    for &n in &n_grid {
        for (&t, o) in t_grid.iter().zip(&oracle) {
            let cell: Vec<RunRecord> = pool.install(|| {
                (0..config.repeats)
                    .into_par_iter()
                    .map(|r| run_once(config, &scale_pool, n, t, r, o.value))
                    .collect::<Result<Vec<_>>>()
            })?;
            for rec in &cell {
                writer.serialize(rec)?;
            }
            writer.flush()?;
            progress(Progress::Cell {
                n,
                horizon: t,
                records: &cell,
            });
            records.extend(cell);
        }
    }
    drop(writer);

    let summary = summarize(&records);
    write_summary(&summary_path, &summary)?;
    let sidecar = Sidecar {
        library: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config,
        oracle: &oracle,
    };
    let mut f = File::create(&sidecar_path)?;
    f.write_all(serde_json::to_string_pretty(&sidecar)?.as_bytes())?;
    f.write_all(b"\n")?;

    Ok(ExperimentOutput {
        records,
        summary,
        oracle,
        runs_path,
        summary_path,
        sidecar_path,
    })
}

fn io_context(e: std::io::Error, path: &Path) -> OpeError {
    OpeError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(n: usize, t: usize, r: usize, err: f64) -> RunRecord {
        RunRecord {
            n,
            horizon: t,
            repeat_index: r,
            seed: 0,
            value_estimate: err,
            oracle_value: 0.0,
            abs_error: err,
            wall_time_seconds: 0.0,
            per_step_scales: String::new(),
        }
    }

    #[test]
    fn seed_packing_is_injective_on_a_grid() {
        let mut seen = std::collections::HashSet::new();
        for n in [1usize, 2, 256, 1 << 23] {
            for t in [1usize, 2, 3, 65_535] {
                for r in 0..50 {
                    assert!(seen.insert(derive_run_seed(9, n, t, r)));
                }
            }
        }
    }

    #[test]
    fn slope_of_exact_power_laws() {
        let recs: Vec<RunRecord> = [1usize, 2, 4, 8].iter().map(|&t| record(100, t, 0, 0.01 * t as f64)).collect();
        let rows = summarize(&recs);
        for r in &rows {
            assert!((r.loglog_slope_vs_t.unwrap() - 1.0).abs() < 1e-9);
            assert_eq!(r.loglog_slope_vs_n, None);
        }
        let recs: Vec<RunRecord> = [100usize, 400, 1600]
            .iter()
            .map(|&n| record(n, 3, 0, 2.0 * (n as f64).powf(-0.3)))
            .collect();
        for r in summarize(&recs) {
            assert!((r.loglog_slope_vs_n.unwrap() + 0.3).abs() < 1e-9);
        }
        let recs: Vec<RunRecord> = [100usize, 400].iter().map(|&n| record(n, 1, 0, 0.2)).collect();
        assert_eq!(summarize(&recs)[0].loglog_slope_vs_n, Some(0.0));
    }

    #[test]
    fn summary_mae_and_se() {
        let errs = [0.1, 0.4, 0.2, 0.7];
        let recs: Vec<RunRecord> = errs.iter().enumerate().map(|(i, &e)| record(50, 2, i, e)).collect();
        let rows = summarize(&recs);
        assert_eq!(rows.len(), 1);
        let mean = errs.iter().sum::<f64>() / 4.0;
        assert!((rows[0].mae - mean).abs() < 1e-12);
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / 3.0;
        assert!((rows[0].se.unwrap() - (var / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&recs[..1])[0].se, None);
    }

    #[test]
    fn config_parsing_and_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            n_grid = [256]
            t_grid = [1, 3]
            repeats = 2
            base_seed = 11
            output_path = "out"

            [sim_overrides]
            epsilon_greedy = 0.3
            "#,
        )
        .unwrap();
        assert_eq!(cfg.folds, 5);
        assert_eq!(cfg.mc_rollouts, 50_000);
        assert_eq!(cfg.scale_pool, ScalePoolConfig::default());
        assert_eq!(cfg.sim_overrides.epsilon_greedy, 0.3);
        assert_eq!(cfg.sim_overrides.mu_s, SimParams::default().mu_s);
        let pool = cfg.scale_pool.values().unwrap();
        assert_eq!(pool.len(), 30);
        assert_eq!((pool[0], pool[29]), (0.001, 0.05));
    }

    #[test]
    fn config_rejects_bad_values() {
        let base = "t_grid = [1]\nrepeats = 1\nbase_seed = 0\noutput_path = 'o'\n";
        for extra in ["n_grid = [0]", "n_grid = [10]", "n_grid = [100]\nfolds = 1", "n_grid = [100]\nbogus = 1"] {
            let err = ExperimentConfig::from_toml_str(&format!("{base}{extra}\n")).unwrap_err();
            assert!(matches!(err, OpeError::Config(_)), "{extra}: {err}");
        }
    }

    #[test]
    fn oracle_key_depends_on_inputs() {
        let p = SimParams::default();
        let k = oracle_key(&p, 3, 100, 1).unwrap();
        assert_eq!(k.len(), 64);
        assert_eq!(k, oracle_key(&p, 3, 100, 1).unwrap());
        assert_ne!(k, oracle_key(&p, 4, 100, 1).unwrap());
        let q = SimParams {
            epsilon_greedy: 0.1,
            ..SimParams::default()
        };
        assert_ne!(k, oracle_key(&q, 3, 100, 1).unwrap());
    }

    #[test]
    fn disk_cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = SimParams::default();
        let mut c = OracleCache::new(Some(dir.path().to_path_buf()));
        let a = c.get_or_compute(&p, 2, 200, 5).unwrap();
        let mut c2 = OracleCache::new(Some(dir.path().to_path_buf()));
        let b = c2.get_or_compute(&p, 2, 200, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
