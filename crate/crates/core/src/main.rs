use std::path::PathBuf;
use std::time::Instant;

use anyhow::Context;
use clap::Parser;

use cot_core::harness::{run, write_outputs, Experiment, ExperimentConfig};

/// Runs one verification experiment and writes `<out>/<experiment>.csv`,
/// `<out>/<experiment>.svg` and `<out>/meta.json`.
#[derive(Parser, Debug)]
#[command(name = "cot", version)]
struct Cli {
    /// converge | barycenter | regression | classify | cell-toy | prompt-toy |
    /// gradcheck | concentration | reg-identity
    experiment: Experiment,
    /// JSON config; defaults for the experiment when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated sample sizes, e.g. 100,800.
    #[arg(long, value_delimiter = ',')]
    m: Option<Vec<usize>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Training epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Worker threads for independent (m, seed) cells; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Print the effective config as JSON and exit.
    #[arg(long)]
    print_config: bool,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)
                .with_context(|| format!("loading {}", path.display()))?;
            anyhow::ensure!(
                cfg.experiment == cli.experiment,
                "config is for {} but {} was requested",
                cfg.experiment,
                cli.experiment
            );
            cfg
        }
        None => ExperimentConfig::defaults_for(cli.experiment),
    };
    if let Some(m) = cli.m {
        cfg.m = m;
    }
    if let Some(s) = cli.seeds {
        cfg.seeds = s;
    }
    if let Some(e) = cli.epochs {
        cfg.cot.epochs = e;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    cfg.out_dir = cli.out;
    cfg.validate()?;
    if cli.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg)?);
        return Ok(());
    }
    let start = Instant::now();
    let report = run(&cfg)?;
    write_outputs(&cfg, &report, &cfg.out_dir)?;
    eprintln!(
        "{}: {} rows -> {} ({:.1} s)",
        cfg.experiment,
        report.rows.len(),
        cfg.out_dir.display(),
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
