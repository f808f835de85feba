use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use ope_core::experiment::{self, ExperimentConfig, OracleCache, Progress};
use ope_core::fqe::{estimate_v_bridges, FqeSettings};
use ope_core::npiv::log_spaced_pool;
use ope_core::seed::child_seed;
use ope_core::simulator::{sample_batch, SimParams, TargetPolicy, TrajectoryBatch};
use ope_core::tabular::{check_rank_conditions, ope_via_bridges, random_case, true_value_dp, TabularCase};
use ope_core::OpeError;

#[derive(Parser)]
#[command(name = "ope", version, about = "Off-policy evaluation in confounded POMDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an (n, T) sweep described by a TOML config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Monte Carlo value of the target policy under the default simulator.
    Oracle {
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, default_value_t = 50_000)]
        rollouts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Compare bridge-based identification with dynamic programming on tabular instances.
    TabularCheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Check a single instance from a JSON file instead of random ones.
        #[arg(long)]
        file: Option<PathBuf>,
    },
    /// Recompute the summary table from a runs CSV.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a behavior batch from the simulator and write it as CSV.
    Sample {
        #[arg(long)]
        n: usize,
        #[arg(long = "T")]
        horizon: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Estimate the target policy value from a batch CSV.
    Estimate {
        #[arg(long)]
        batch: PathBuf,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const TABULAR_TOL: f64 = 1e-6;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<OpeError>()) {
        Some(OpeError::Config(_) | OpeError::InvalidInput(_)) => 2,
        Some(
            OpeError::NumericalFailure(_)
            | OpeError::NotPsd { .. }
            | OpeError::NoBridgeSolution { .. }
            | OpeError::DegenerateData(_),
        ) => 3,
        _ => 1,
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config } => run(config),
        Command::Oracle {
            horizon,
            rollouts,
            seed,
        } => oracle(horizon, rollouts, seed),
        Command::TabularCheck { instances, seed, file } => tabular_check(instances, seed, file),
        Command::Summarize { input, out } => summarize(input, out),
        Command::Sample { n, horizon, seed, out } => sample(n, horizon, seed, out),
        Command::Estimate { batch, folds, seed } => estimate(batch, folds, seed),
    }
}

fn run(path: PathBuf) -> Result<()> {
    let config = ExperimentConfig::load(&path)?;
    let out = experiment::run_experiment_with_progress(&config, |p| match p {
        Progress::Oracle(o) => eprintln!("oracle T={}: {:.6} (se {:.2e})", o.horizon, o.value, o.se),
        Progress::Cell { n, horizon, records } => {
            let mae = records.iter().map(|r| r.abs_error).sum::<f64>() / records.len() as f64;
            eprintln!("n={n} T={horizon}: MAE {mae:.5} over {} runs", records.len());
        }
    })?;
    println!("runs:    {}", out.runs_path.display());
    println!("summary: {}", out.summary_path.display());
    print_summary(&out.summary)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into())
}

fn print_summary(rows: &[experiment::SummaryRow]) -> Result<()> {
    let mut out = io::stdout().lock();
    writeln!(out, "{:>7} {:>4} {:>10} {:>10} {:>9} {:>9}", "n", "T", "MAE", "se", "slope_T", "slope_n")?;
    for r in rows {
        writeln!(
            out,
            "{:>7} {:>4} {:>10.5} {:>10} {:>9} {:>9}",
            r.n,
            r.horizon,
            r.mae,
            fmt_opt(r.se),
            fmt_opt(r.loglog_slope_vs_t),
            fmt_opt(r.loglog_slope_vs_n)
        )?;
    }
    Ok(())
}

fn oracle(horizon: usize, rollouts: usize, seed: u64) -> Result<()> {
    let v = OracleCache::default().get_or_compute(&SimParams::default(), horizon, rollouts, seed)?;
    println!("{}", serde_json::to_string(&v)?);
    Ok(())
}

fn check_case(case: &TabularCase) -> Result<(f64, f64, usize)> {
    let report = check_rank_conditions(&case.pomdp)?;
    if !report.passed() {
        anyhow::bail!(OpeError::DegenerateData(format!(
            "rank conditions fail: {:?}",
            report.deficient
        )));
    }
    let bridge = ope_via_bridges(&case.pomdp, &case.target)?;
    let dp = true_value_dp(&case.pomdp, &case.target)?;
    Ok((bridge, dp, report.skipped_unreachable.len()))
}

fn tabular_check(instances: usize, seed: u64, file: Option<PathBuf>) -> Result<()> {
    let cases: Vec<(String, TabularCase)> = match file {
        Some(path) => {
            let case = TabularCase::load(&path).with_context(|| format!("loading {}", path.display()))?;
            vec![(path.display().to_string(), case)]
        }
        None => (0..instances)
            .map(|i| {
                let s = child_seed(seed, i as u64);
                random_case(s).map(|c| (format!("instance {i} (seed {s})"), c))
            })
            .collect::<ope_core::Result<_>>()?,
    };
    let mut worst = 0.0f64;
    for (label, case) in &cases {
        let (bridge, dp, skipped) = check_case(case).with_context(|| label.clone())?;
        let gap = (bridge - dp).abs();
        worst = worst.max(gap);
        let d = case.pomdp.dims;
        println!(
            "{label}: |S|={} |U|={} |W|={} |Z|={} T={} bridge={bridge:.12} dp={dp:.12} gap={gap:.3e} skipped={skipped}",
            d.n_s, d.n_u, d.n_w, d.n_z, d.horizon
        );
    }
    println!("max gap {worst:.3e} over {} instances", cases.len());
    if worst > TABULAR_TOL {
        anyhow::bail!(OpeError::NumericalFailure(format!(
            "identification gap {worst:.3e} exceeds {TABULAR_TOL:e}"
        )));
    }
    Ok(())
}

fn summarize(input: PathBuf, out: PathBuf) -> Result<()> {
    let records = experiment::read_records(&input).with_context(|| format!("reading {}", input.display()))?;
    let rows = experiment::summarize(&records);
    experiment::write_summary(&out, &rows)?;
    print_summary(&rows)
}

fn sample(n: usize, horizon: usize, seed: u64, out: PathBuf) -> Result<()> {
    let batch = sample_batch(&SimParams::default(), n, horizon, seed)?;
    let file = File::create(&out).with_context(|| format!("creating {}", out.display()))?;
    batch.write_csv(BufWriter::new(file))?;
    Ok(())
}

fn estimate(path: PathBuf, folds: usize, seed: u64) -> Result<()> {
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let batch = TrajectoryBatch::read_csv(file)?;
    let params = SimParams::default();
    let settings = FqeSettings::cross_validated(log_spaced_pool(30, 0.001, 0.05)?, folds, seed);
    let res = estimate_v_bridges(&batch, &TargetPolicy::new(&params), &settings)?;
    let report = serde_json::json!({
        "n": res.n,
        "T": res.horizon,
        "value_estimate": res.value_estimate,
        "steps": res.step_summaries(),
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}
