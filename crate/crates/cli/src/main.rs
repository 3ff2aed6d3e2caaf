use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use occam::harness::{self, Algorithm, ExperimentConfig, RunSummary};
use occam::Error;

#[derive(Parser)]
#[command(name = "occam", version, about = "Train, prune and compare small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Gd,
    Ogd,
    Ptp,
}

impl From<Algo> for Algorithm {
    fn from(a: Algo) -> Self {
        match a {
            Algo::Gd => Algorithm::Gd,
            Algo::Ogd => Algorithm::Ogd,
            Algo::Ptp => Algorithm::PostTrainPrune,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment and write metrics, traces and a summary.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        algo: Option<Algo>,
        #[arg(long)]
        seed_count: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare the summaries of two finished experiments (a relative to b).
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Turn a metrics.csv into long-format mean/stderr curves.
    Curves {
        metrics: PathBuf,
        /// Output file; standard output when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train {
            config,
            algo,
            seed_count,
            out,
        } => {
            let mut cfg = ExperimentConfig::from_path(&config)?;
            cfg.override_with(algo.map(Into::into), seed_count, out);
            let artifacts = harness::run_with_log(&cfg, &mut |line| eprintln!("{line}"))?;
            let m = &artifacts.summary.mean;
            println!("wrote {}", artifacts.dir.display());
            if let (Some(loss), Some(acc)) = (m.test_loss, m.test_acc) {
                println!(
                    "best-epoch test loss {:.5} ± {:.5}, accuracy {:.4} ± {:.4}",
                    loss.mean, loss.stderr, acc.mean, acc.stderr
                );
            }
            println!(
                "active fraction {:.4}, final size {:.1}, compute {:.3}",
                m.active_fraction.mean, m.final_size.mean, m.compute.mean
            );
        }
        Command::Compare { dir_a, dir_b, format } => {
            let a = RunSummary::load(&dir_a)?;
            let b = RunSummary::load(&dir_b)?;
            let c = harness::compare(&a, &b)?;
            match format {
                Format::Text => print!("{}", c.to_text()),
                Format::Json => println!("{}", c.to_json()),
            }
        }
        Command::Curves { metrics, out } => {
            let points = harness::load_curves(&metrics)?;
            let bytes = harness::curves_csv(&points)?;
            match out {
                Some(path) => fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{}", String::from_utf8_lossy(&bytes)),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
