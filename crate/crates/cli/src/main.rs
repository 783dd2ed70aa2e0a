//! `cfbench`: drives the benchmark stages from a JSON config.
//!
//! Exit codes: 0 success, 2 config error, 3 stage failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cfbench_core::exec::{init_pool, Exec};
use cfbench_core::harness::{
    collect_report, emit_report, evaluate_axis, make_data, run_benchmark, train_family, BenchmarkConfig, HarnessError,
};
use cfbench_core::metrics::Axis;
use cfbench_core::ModelFamily;

#[derive(Parser)]
#[command(name = "cfbench", version, about = "Counterfactual generation benchmark on synthetic 3D phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Benchmark config (JSON).
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config key, e.g. `--set data.subjects_a=40`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run every fan-out on the calling thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Render both cohorts, split by subject, fit the normalizer.
    MakeData(ConfigArgs),
    /// Train one model family on the train split.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        family: ModelFamily,
    },
    /// Score one trained family on one axis, or `all`.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, short)]
        family: ModelFamily,
        #[arg(long, short)]
        axis: String,
    },
    /// Collect finished stages into report.json, CSV tables and markdown.
    Report(ConfigArgs),
    /// All stages end to end, skipping any that are already cached.
    Run(ConfigArgs),
}

enum Failure {
    Config(String),
    Stage(String),
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) | HarnessError::TooFewSubjects(_) => Failure::Config(e.to_string()),
            _ => Failure::Stage(e.to_string()),
        }
    }
}

fn load(args: &ConfigArgs) -> Result<(BenchmarkConfig, Exec), Failure> {
    let cfg = BenchmarkConfig::load(&args.config, &args.overrides)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::auto() };
    Ok((cfg, exec))
}

fn axes(spec: &str) -> Result<Vec<Axis>, Failure> {
    if spec.eq_ignore_ascii_case("all") {
        return Ok(Axis::ALL.to_vec());
    }
    spec.split(',').map(|s| s.trim().parse::<Axis>().map_err(Failure::Config)).collect()
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::MakeData(a) => {
            let (cfg, exec) = load(&a)?;
            let ds = make_data(&cfg, exec)?;
            println!(
                "{} scans; {} train / {} test subjects",
                ds.scans.len(),
                ds.train_subjects.len(),
                ds.test_subjects.len()
            );
        }
        Command::Train { cfg: a, family } => {
            let (cfg, exec) = load(&a)?;
            make_data(&cfg, exec)?;
            let ckpt = train_family(&cfg, family)?;
            println!("{family}: weights {}", ckpt.weights_hash());
            for (phase, metric, v) in ckpt.log.final_losses() {
                println!("  {phase}/{metric} = {v:.5}");
            }
        }
        Command::Eval { cfg: a, family, axis } => {
            let (cfg, exec) = load(&a)?;
            for ax in axes(&axis)? {
                evaluate_axis(&cfg, family, ax, exec)?;
                println!("{family} {} done", ax.name());
            }
        }
        Command::Report(a) => {
            let (cfg, _) = load(&a)?;
            let report = collect_report(&cfg, Vec::new())?;
            emit_report(&report, &cfg.report_dir())?;
            println!("report written to {}", cfg.report_dir().display());
        }
        Command::Run(a) => {
            let (cfg, exec) = load(&a)?;
            let report = run_benchmark(&cfg, exec)?;
            println!("report written to {}", cfg.report_dir().display());
            if !report.succeeded() {
                let stages: Vec<&str> = report.failures.iter().map(|f| f.stage.as_str()).collect();
                return Err(Failure::Stage(format!("failed stages: {}", stages.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    init_pool();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(m)) => {
            eprintln!("stage failure: {m}");
            ExitCode::from(3)
        }
    }
}
