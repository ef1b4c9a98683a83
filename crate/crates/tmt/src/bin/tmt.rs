use clap::Parser;
use std::path::PathBuf;
use std::process::ExitCode;
use tmt::cli_io::{load_config, resolve_out_dir, run_experiment, RunReport, EXPERIMENTS};

/// Geodesic integral-moment transform experiments on the unit disk.
#[derive(Parser)]
#[command(name = "tmt", version, about)]
struct Cli {
    /// Experiment: forward, identities, decompose, cascade, tube, support,
    /// or simplicity.
    experiment: String,

    /// Path to the JSON experiment configuration.
    #[arg(long)]
    config: PathBuf,

    /// Output directory (falls back to the config `out` key, then TMT_OUT).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Cap on parallel worker threads.
    #[arg(long)]
    threads: Option<usize>,

    /// Override the config RNG seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn run(cli: &Cli) -> tmt::Result<RunReport> {
    if !EXPERIMENTS.contains(&cli.experiment.as_str()) {
        return Err(tmt::TmtError::Argument(format!(
            "unknown experiment `{}`; expected one of {}",
            cli.experiment,
            EXPERIMENTS.join(", ")
        )));
    }
    let mut cfg = load_config(&cli.config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out_dir = resolve_out_dir(cli.out.as_deref(), &cfg);
    run_experiment(&cfg, &cli.experiment, &out_dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(k) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(k).build_global() {
            eprintln!("warning: could not set thread count: {e}");
        }
    }
    match run(&cli) {
        Ok(report) => {
            for (name, secs) in &report.timings {
                println!("time   {name}: {secs:.3}s");
            }
            for (name, value) in &report.stats {
                println!("stat   {name}: {value}");
            }
            for c in &report.checks {
                let tag = if c.pass { "PASS" } else { "FAIL" };
                println!(
                    "{tag}   {}: {:.6e} (threshold {:.6e})",
                    c.name, c.value, c.threshold
                );
            }
            if report.passed() {
                println!("all {} checks passed", report.checks.len());
                ExitCode::SUCCESS
            } else {
                let failed = report.checks.iter().filter(|c| !c.pass).count();
                eprintln!("{failed} invariant check(s) failed");
                ExitCode::from(1)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
