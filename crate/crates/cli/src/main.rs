//! `pets` — collect maze data, extend it round by round, train the
//! planners, and evaluate them.
//!
//! Exit codes: 0 on success, 2 for configuration errors, 3 for runtime
//! aborts (for example an extension round whose acceptance rate collapses).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pets_core::harness::{ExperimentConfig, Pipeline, PlannerKind, TaskKind, TrainTarget};
use pets_core::pte::Strategy;
use pets_core::Error;

#[derive(Parser)]
#[command(name = "pets", version, about = "Trajectory-extension planning workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Configuration file (`key = value` lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the maze layout.
    #[arg(long, global = true)]
    layout: Option<String>,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Collect the short-trajectory base dataset.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Run extension rounds over the base dataset.
    Pte {
        #[command(flatten)]
        common: Common,
        /// Extension strategy.
        #[arg(long, default_value = "linear")]
        strategy: String,
        /// Number of rounds.
        #[arg(long, default_value_t = 3)]
        rounds: usize,
        /// Also write the union of the base and every round.
        #[arg(long)]
        aggregate: bool,
    },
    /// Train one model: stitcher, planner, invdyn, reward, or depth.
    Train {
        #[command(flatten)]
        common: Common,
        /// Which model to train.
        which: String,
        /// Resume planner training from its checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a planner over seeded episodes.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Planner: flat, hd, or hmd.
        #[arg(long, default_value = "hmd")]
        planner: String,
        /// Task family: single (fixed goal) or multi (random pairs).
        #[arg(long, default_value = "multi")]
        task: String,
        /// Episode count; defaults to the configured value.
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Dataset metrics (mean length, coverage, length histogram) as CSV.
    Metrics {
        #[command(flatten)]
        common: Common,
        /// Dataset files to measure.
        #[arg(required = true)]
        datasets: Vec<PathBuf>,
    },
    /// Aggregate every eval report in the output directory into one CSV.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

fn load_pipeline(common: &Common) -> Result<Pipeline, Error> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.master_seed = seed;
    }
    if let Some(layout) = &common.layout {
        cfg.layout = layout.clone();
    }
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    Pipeline::new(cfg)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Collect { common } => {
            let pipeline = load_pipeline(&common)?;
            let path = pipeline.collect()?;
            println!("collected base dataset -> {}", path.display());
        }
        Command::Pte {
            common,
            strategy,
            rounds,
            aggregate,
        } => {
            let pipeline = load_pipeline(&common)?;
            let strategy = Strategy::parse(&strategy)?;
            let paths = pipeline.pte(strategy, rounds, aggregate)?;
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Command::Train {
            common,
            which,
            resume,
        } => {
            let pipeline = load_pipeline(&common)?;
            let target = TrainTarget::parse(&which)?;
            let path = pipeline.train(target, resume)?;
            println!("trained {which} -> {}", path.display());
        }
        Command::Eval {
            common,
            planner,
            task,
            seeds,
        } => {
            let pipeline = load_pipeline(&common)?;
            let planner = PlannerKind::parse(&planner)?;
            let task = TaskKind::parse(&task)?;
            let seeds = seeds.unwrap_or(pipeline.cfg.eval_seeds);
            let report = pipeline.eval(planner, task, seeds)?;
            println!(
                "{} {}: reach {:.1}% | return {:.3} +- {:.3} over {} seeds{}",
                report.planner,
                report.task,
                100.0 * report.reach_rate,
                report.mean_return,
                report.stderr_return,
                report.seeds,
                report
                    .mean_score
                    .map(|s| format!(" | score {s:.1}"))
                    .unwrap_or_default()
            );
        }
        Command::Metrics { common, datasets } => {
            let pipeline = load_pipeline(&common)?;
            let csv = pipeline.metrics(&datasets)?;
            let path = pipeline.cfg.out_dir.join("metrics.csv");
            std::fs::create_dir_all(&pipeline.cfg.out_dir)?;
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
        Command::Report { common } => {
            let pipeline = load_pipeline(&common)?;
            let csv = pipeline.report()?;
            let path = pipeline.cfg.out_dir.join("report.csv");
            std::fs::write(&path, &csv)?;
            print!("{csv}");
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(err @ Error::Config { .. }) => {
            eprintln!("configuration error: {err}");
            ExitCode::from(2)
        }
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(3)
        }
    }
}
