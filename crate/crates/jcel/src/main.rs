//! Command-line front end: run a config file, one of the canned schemes, a
//! bound-only sweep, or the fast invariant suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use jcel::harness::{
    crlb_curve, emit_crlb, emit_results, loss_sweep, run_scheme, selftest_report, Baseline,
    CrlbPoint, ExperimentConfig, MetricRow, SweepConfig, SweepVariable,
};

#[derive(Parser)]
#[command(
    name = "jcel",
    version,
    about = "Joint channel estimation and localization experiments for pinching-antenna OFDM uplinks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every experiment subcommand; unset flags keep the config
/// (or canned-scheme) defaults.
#[derive(Args)]
struct Overrides {
    /// Delay extractor: omp or bpvi.
    #[arg(long)]
    extractor: Option<String>,
    /// Reception model: pass or multi_bs.
    #[arg(long)]
    baseline: Option<String>,
    /// Monte-Carlo trials per sweep point.
    #[arg(long)]
    trials: Option<usize>,
    /// Base seed for the per-trial noise streams.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for CSV results and the manifest.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Sweep override, e.g. tx_power_dbm=0,4,8 or num_subcarriers=16,32,64.
    #[arg(long)]
    sweep: Option<String>,
}

impl Overrides {
    fn apply(&self, config: &mut ExperimentConfig) -> jcel::error::Result<()> {
        if let Some(e) = &self.extractor {
            config.extractor = e.parse()?;
        }
        if let Some(b) = &self.baseline {
            config.baseline = b.parse::<Baseline>()?;
        }
        if let Some(t) = self.trials {
            config.trials = t;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        if let Some(o) = &self.out {
            config.out = Some(o.clone());
        }
        if let Some(sw) = &self.sweep {
            config.sweep = SweepConfig::parse(sw)?;
        }
        Ok(())
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config file.
    Simulate {
        /// Path to the config file.
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run one of the four canned schemes.
    Scheme {
        /// Scheme id, 1-4.
        id: u8,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compute only the theoretical bounds over the sweep.
    Crlb {
        /// Scheme id, 1-4.
        #[arg(long)]
        scheme: u8,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Run the fast invariant suite; exits nonzero on any failure.
    Selftest,
}

fn print_rows(rows: &[MetricRow]) {
    println!(
        "{:>12} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>8} {:>7}",
        "sweep_value", "nmse_h", "crlb_h", "nmse_z", "crlb_z", "nmse_pos", "crlb_pos", "iters", "failed"
    );
    for r in rows {
        println!(
            "{:>12.4} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>8.2} {:>7}",
            r.sweep_value,
            r.nmse_h_db,
            r.crlb_h_db,
            r.nmse_z_db,
            r.crlb_z_db,
            r.nmse_pos_db,
            r.crlb_pos_db,
            r.mean_iterations,
            r.failed_trials
        );
    }
}

fn print_bounds(points: &[CrlbPoint]) {
    println!("{:>12} {:>10} {:>10} {:>10}", "sweep_value", "crlb_h", "crlb_z", "crlb_pos");
    for p in points {
        println!(
            "{:>12.4} {:>10.2} {:>10.2} {:>10.2}",
            p.sweep_value, p.crlb_h_db, p.crlb_z_db, p.crlb_pos_db
        );
    }
}

fn run_experiment(config: &ExperimentConfig) -> jcel::error::Result<()> {
    // An attenuation sweep on scheme 1 is the canned loss study; everything
    // else goes through the generic sweep runner.
    let rows = if config.scheme == Some(1) && config.sweep.variable == SweepVariable::KLoss {
        loss_sweep(config)?
    } else {
        run_scheme(config)?
    };
    print_rows(&rows);
    if let Some(dir) = &config.out {
        let files = emit_results(&rows, dir, config)?;
        for f in files {
            println!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn run() -> jcel::error::Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate { config, overrides } => {
            let mut config = ExperimentConfig::from_toml_file(&config)?;
            overrides.apply(&mut config)?;
            run_experiment(&config)
        }
        Command::Scheme { id, overrides } => {
            let mut config = ExperimentConfig::scheme_default(id)?;
            overrides.apply(&mut config)?;
            run_experiment(&config)
        }
        Command::Crlb { scheme, overrides } => {
            let mut config = ExperimentConfig::scheme_default(scheme)?;
            overrides.apply(&mut config)?;
            let points = crlb_curve(&config)?;
            print_bounds(&points);
            if let Some(dir) = &config.out {
                for f in emit_crlb(&points, dir, &config)? {
                    println!("wrote {}", f.display());
                }
            }
            Ok(())
        }
        Command::Selftest => {
            let report = selftest_report();
            let mut failed = 0;
            for check in &report {
                let tag = if check.pass { "PASS" } else { "FAIL" };
                println!("{tag} {} ({})", check.name, check.detail);
                if !check.pass {
                    failed += 1;
                }
            }
            if failed > 0 {
                return Err(jcel::JcelError::Config(format!("{failed} self checks failed")));
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
