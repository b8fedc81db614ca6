use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use opwalk::config::{Experiment, ExperimentConfig, Settings};
use opwalk::report::{self, Axis};
use opwalk::{run_experiment, CliError};
use opwalk_core::annealed::AnnealedCache;

/// Run a named experiment, or `plot` to turn a report into plot series.
#[derive(Debug, Parser)]
#[command(name = "opwalk", version)]
struct Cli {
    /// Experiment name, or `plot`.
    experiment: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    n: Option<i64>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    reps: Option<u64>,
    #[arg(long)]
    horizon_margin: Option<i64>,
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exit with status 2 when a check fails.
    #[arg(long)]
    hard: bool,
    /// Any config key, e.g. `--set n_list=[25,50]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Report CSV read by `plot`.
    #[arg(long, default_value = "report.csv")]
    report: PathBuf,
    #[arg(long, default_value = "")]
    statistic: String,
    #[arg(long, default_value = "n")]
    x: String,
    #[arg(long, default_value = "seed")]
    group: String,
}

fn overrides(cli: &Cli) -> Result<Settings, CliError> {
    let mut s = Settings {
        d: cli.d,
        p: cli.p,
        n: cli.n,
        seeds: cli.seeds,
        seed_base: cli.seed_base,
        reps: cli.reps,
        horizon_margin: cli.horizon_margin,
        threads: cli.threads,
        out: cli.out.clone(),
        hard: cli.hard.then_some(true),
        ..Settings::default()
    };
    for kv in &cli.set {
        s.parse_assignment(kv)?;
    }
    Ok(s)
}

fn plot(cli: &Cli) -> Result<(), CliError> {
    let rows = report::read_rows(File::open(&cli.report)?)?;
    let (x, group): (Axis, Axis) = (cli.x.parse()?, cli.group.parse()?);
    report::emit_plotdata(std::io::stdout().lock(), &rows, &cli.statistic, x, group)?;
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    if cli.experiment == "plot" {
        plot(cli)?;
        return Ok(true);
    }
    let experiment: Experiment = cli.experiment.parse()?;
    let file = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let cfg = file.resolve(experiment, &overrides(cli)?)?;
    if cfg.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let cache = AnnealedCache::from_env(cfg.settings.cache.as_deref())?;
    let report = run_experiment(&cfg, &cache)?;
    for c in &report.checks {
        println!("{} {}: {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
    }
    println!(
        "{} rows, run {} in {:.1}s -> {}",
        report.rows.len(),
        report.run_id,
        report.wall_clock_seconds,
        cfg.out.display()
    );
    Ok(!cfg.hard || report.all_passed())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("hint: {h}");
            }
            ExitCode::FAILURE
        }
    }
}
