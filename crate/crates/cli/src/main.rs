use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use se23nav::harness::{
    emit_monte_carlo, emit_report, export_inputs, run_inputs, run_monte_carlo, run_replay, selftest, summary_text,
    synthesize, HarnessError, Mode, RunConfig,
};

#[derive(Parser)]
#[command(name = "se23nav", about = "SE2(3) navigation filter with prescribed performance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// key=value configuration file; every key has a default.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Report path; the summary is written next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a trajectory and run the filter on it.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Also write the generated inputs as CSV files into this directory.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Run the filter on recorded CSV inputs.
    Replay {
        #[command(flatten)]
        common: Common,
    },
    /// Seeded batch of simulations.
    Montecarlo {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        trials: usize,
    },
    /// Quick property checks.
    Selftest {
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn load(common: &Common) -> Result<RunConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.output = Some(out.clone());
    }
    Ok(cfg)
}

fn finish(report: &se23nav::harness::RunReport, cfg: &RunConfig) -> Result<ExitCode, HarnessError> {
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    match &cfg.output {
        Some(path) => emit_report(report, path)?,
        None => print!("{}", summary_text(&report.summary)),
    }
    Ok(if report.summary.diverged { ExitCode::from(2) } else { ExitCode::SUCCESS })
}

fn run(cli: Cli) -> Result<ExitCode, HarnessError> {
    match cli.command {
        Command::Simulate { common, export } => {
            let mut cfg = load(&common)?;
            cfg.mode = Mode::Simulate;
            cfg.validate()?;
            let inputs = synthesize(&cfg);
            if let Some(dir) = export {
                export_inputs(&inputs, &dir)?;
            }
            let report = run_inputs(&cfg, &inputs)?;
            finish(&report, &cfg)
        }
        Command::Replay { common } => {
            let mut cfg = load(&common)?;
            cfg.mode = Mode::Replay;
            let report = run_replay(&cfg)?;
            finish(&report, &cfg)
        }
        Command::Montecarlo { common, trials } => {
            let cfg = load(&common)?;
            let report = run_monte_carlo(&cfg, trials)?;
            let s = &report.stats;
            match &cfg.output {
                Some(path) => emit_monte_carlo(&report, path)?,
                None => println!(
                    "trials={} divergences={} mean_e1_ms={} max_e1_ms={}",
                    s.trials, s.divergences, s.mean_e1_ms, s.max_e1_ms
                ),
            }
            Ok(if s.divergences > 0 { ExitCode::from(2) } else { ExitCode::SUCCESS })
        }
        Command::Selftest { seed } => {
            let results = selftest(seed);
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
