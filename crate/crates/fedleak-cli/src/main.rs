//! `fedleak`: config-driven experiment runner for the reconstruction lab.
//!
//! Exit codes: 0 success, 2 configuration problem, 3 runtime failure.

mod config;
mod pipeline;
mod report;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use pipeline::{execute, RunContext, Scope};

#[derive(Parser)]
#[command(name = "fedleak", version, about = "federated-learning data reconstruction lab")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML); may also be given positionally.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    #[arg(value_name = "CONFIG")]
    config_pos: Option<PathBuf>,
    /// Overrides seeds.master from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for parallel attacks (default: logical cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Validate and print the plan without touching the filesystem.
    #[arg(long)]
    dry_run: bool,
    /// Overrides output.dir from the config.
    #[arg(long, value_name = "DIR")]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run every stage the config describes.
    Run(Common),
    /// Gradient-inversion sweep only.
    AttackGi {
        #[command(flatten)]
        common: Common,
        /// Attack exactly this many victim batches per batch size.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Linear-layer leakage only.
    AttackLll {
        #[command(flatten)]
        common: Common,
        /// Attack exactly this many victim batches.
        #[arg(long)]
        batches: Option<usize>,
    },
    /// Downstream training comparison (centralized / leaked / fine-tuned).
    Train {
        #[command(flatten)]
        common: Common,
        /// Use an existing leaked-dataset directory instead of attacking.
        #[arg(long, value_name = "DIR")]
        leaked: Option<PathBuf>,
    },
    /// Federated baseline only.
    FlBaseline(Common),
    /// List the artifacts in an output directory.
    Stats {
        /// Output directory of a previous run.
        #[arg(long, value_name = "DIR")]
        output: Option<PathBuf>,
        #[arg(value_name = "DIR")]
        output_pos: Option<PathBuf>,
    },
    /// Merge several runs into one comparison CSV on stdout.
    Report {
        /// Run directories to merge, in row order.
        #[arg(value_name = "DIR", required = true)]
        dirs: Vec<PathBuf>,
        /// Also write the CSV here.
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit::Config(e)) => {
            eprintln!("config error: {:#}", e);
            ExitCode::from(2)
        }
        Err(Exit::Runtime(e)) => {
            eprintln!("error: {:#}", e);
            ExitCode::from(3)
        }
    }
}

enum Exit {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn dispatch(cli: Cli) -> Result<(), Exit> {
    match cli.cmd {
        Cmd::Run(common) => run_scoped(&common, Scope::Full, None, None),
        Cmd::AttackGi { common, batches } => run_scoped(&common, Scope::GiOnly, batches, None),
        Cmd::AttackLll { common, batches } => run_scoped(&common, Scope::LllOnly, batches, None),
        Cmd::Train { common, leaked } => {
            run_scoped(&common, Scope::TrainOnly, None, leaked.as_deref())
        }
        Cmd::FlBaseline(common) => run_scoped(&common, Scope::FlOnly, None, None),
        Cmd::Stats { output, output_pos } => {
            let dir = output
                .or(output_pos)
                .ok_or_else(|| Exit::Config(anyhow::anyhow!("stats needs an output directory")))?;
            let table = report::stats(&dir).map_err(Exit::Runtime)?;
            print!("{}", table);
            Ok(())
        }
        Cmd::Report { dirs, output } => {
            let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
            let csv = report::report(&refs).map_err(Exit::Runtime)?;
            print!("{}", csv);
            if let Some(path) = output {
                std::fs::write(&path, &csv)
                    .map_err(|e| Exit::Runtime(anyhow::Error::new(e)))?;
            }
            Ok(())
        }
    }
}

fn run_scoped(
    common: &Common,
    scope: Scope,
    batches: Option<usize>,
    leaked: Option<&Path>,
) -> Result<(), Exit> {
    let path = common
        .config
        .as_ref()
        .or(common.config_pos.as_ref())
        .ok_or_else(|| Exit::Config(anyhow::anyhow!("no config given (--config FILE)")))?;
    let (cfg, raw) = ExperimentConfig::load(path).map_err(Exit::Config)?;
    if let Some(jobs) = common.jobs {
        if jobs > 0 {
            // ignore failure: the global pool may already exist in tests
            let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
        }
    }
    let ctx = RunContext {
        seed: common.seed.unwrap_or(cfg.seeds.master),
        out: common.output.clone().unwrap_or_else(|| PathBuf::from(&cfg.output.dir)),
        raw,
        cfg,
        dry_run: common.dry_run,
    };
    match execute(&ctx, scope, batches, leaked) {
        Ok(summary) => {
            if !ctx.dry_run {
                println!(
                    "done: {} stage(s), {} artifact(s) in {}",
                    summary.stages.len(),
                    summary.artifacts.len(),
                    ctx.out.display()
                );
            }
            Ok(())
        }
        // stage-selection mistakes are config errors; everything after
        // directory creation is runtime
        Err(e) => {
            let msg = format!("{:#}", e);
            if msg.contains("section") || msg.contains("attack.kind") {
                Err(Exit::Config(e))
            } else {
                Err(Exit::Runtime(e))
            }
        }
    }
}
