//! Command-line entry point. Exit codes: 0 success, 2 validation or
//! configuration error, 3 oracle-check failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use wmeval::commands::{cmd_eval, cmd_gen_data, cmd_oracle_check, cmd_train, PROTOCOLS};
use wmeval::config::RunConfig;
use wmeval::{Error, Result};

#[derive(Parser)]
#[command(name = "wmeval", about = "world-model training and policy-evaluation harness")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the expert and noisy-policy dataset splits.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Override the dataset base seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the masked-diffusion world model on the train split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the checkpoint and its optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Run one evaluation protocol against the trained model.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// One of: controllability, roundtrip, shuffle, corruption, correlation.
        #[arg(long)]
        protocol: String,
        /// Also write an SVG chart where the protocol has one.
        #[arg(long)]
        svg: bool,
        /// Use the ground-truth simulator instead of the checkpoint.
        #[arg(long)]
        oracle: bool,
        /// Override the evaluation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Re-verify derived quantities against brute-force references.
    OracleCheck {
        /// Corrupt one gradient on purpose; the check must then fail.
        #[arg(long)]
        mutate_gradient: bool,
    },
}

fn init_threads() {
    if let Ok(v) = std::env::var("WMEVAL_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => eprintln!("ignoring invalid WMEVAL_THREADS value {v:?}"),
        }
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.cmd {
        Cmd::GenData { config, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            let manifest = cmd_gen_data(&cfg)?;
            for (name, info) in &manifest.splits {
                println!(
                    "{name}: {} episodes, success rate {:.3}",
                    info.episodes, info.success_rate
                );
            }
            println!("dataset written to {}", cfg.io.data_dir.display());
            Ok(true)
        }
        Cmd::Train { config, seed, resume } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let out = cmd_train(&cfg, resume)?;
            println!(
                "trained {} steps, recent loss {:.4}, checkpoint {}",
                out.steps_run,
                out.final_loss,
                out.checkpoint.display()
            );
            Ok(true)
        }
        Cmd::Eval { config, protocol, svg, oracle, seed } => {
            if !PROTOCOLS.contains(&protocol.as_str()) {
                return Err(Error::Config(format!(
                    "unknown protocol {protocol:?}; expected one of {PROTOCOLS:?}"
                )));
            }
            let mut cfg = RunConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.eval.seed = s;
            }
            let art = cmd_eval(&cfg, &protocol, svg, oracle)?;
            println!("{}", serde_json::to_string_pretty(&art.aggregate)?);
            println!("csv: {}", art.csv.display());
            if let Some(p) = &art.svg {
                println!("svg: {}", p.display());
            }
            Ok(true)
        }
        Cmd::OracleCheck { mutate_gradient } => {
            let outcome = cmd_oracle_check(mutate_gradient)?;
            for c in &outcome.checks {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                println!("[{tag}] {}: {}", c.name, c.detail);
            }
            Ok(outcome.passed)
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("oracle check failed");
            ExitCode::from(3)
        }
        Err(e @ (Error::Config(_) | Error::Contract(_))) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
