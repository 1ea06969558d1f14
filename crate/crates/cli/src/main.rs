use std::path::PathBuf;
use std::process::ExitCode;

use advinv_core::config::{OracleKind, Overrides, Phase, RunConfig};
use advinv_core::pipeline::{PhaseOutcome, Pipeline, PipelineError};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "advinv", version, about = "Model inversion experiments: run phases, write tables and figures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the private/public split manifest
    Split(RunArgs),
    /// Train the target classifier and the evaluators
    TrainTarget(RunArgs),
    /// Harvest soft labels and fit the shadow model
    Distill(RunArgs),
    /// Generate pseudo-label adversarial examples
    GenAdv(RunArgs),
    /// Train one inversion model per variant
    TrainInversion(RunArgs),
    /// Score reconstructions and write metrics.jsonl
    Evaluate(RunArgs),
    /// Adversarial-training defense sweep
    Defend(RunArgs),
    /// Write tables and figures for one run, or compare several run directories
    Report(ReportArgs),
    /// Every configured phase in order
    Run(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run configuration (TOML)
    #[arg(long, short)]
    config: PathBuf,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Default)]
struct OverrideArgs {
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Weight of the shadow loss for every variant that uses it
    #[arg(long)]
    lambda: Option<f64>,
    /// Pseudo-label size
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    epsilon: Option<f32>,
    #[arg(long)]
    max_rounds: Option<usize>,
    /// target | shadow
    #[arg(long)]
    query_oracle: Option<OracleKind>,
    #[arg(long)]
    workers: Option<usize>,
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            data_root: a.data_root,
            out_dir: a.out_dir,
            seed: a.seed,
            lambda: a.lambda,
            k: a.k,
            epsilon: a.epsilon,
            max_rounds: a.max_rounds,
            query_oracle: a.query_oracle,
            workers: a.workers,
        }
    }
}

#[derive(Args)]
struct ReportArgs {
    /// Run configuration; reports that run
    #[arg(long, short, conflicts_with = "runs")]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: OverrideArgs,
    /// Completed run directories to compare
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    /// Output directory for a multi-run report
    #[arg(long, default_value = "report")]
    out: PathBuf,
}

fn open(config: &PathBuf, overrides: OverrideArgs) -> Result<Pipeline, PipelineError> {
    let mut cfg = RunConfig::load(config).map_err(PipelineError::Config)?;
    cfg.apply(&overrides.into()).map_err(PipelineError::Config)?;
    Pipeline::open(cfg)
}

fn print_outcome(p: &Pipeline, phase: Phase, o: &PhaseOutcome) {
    let secs = p.state().phases.get(phase.as_str()).map(|r| r.seconds).unwrap_or(0.0);
    match o {
        PhaseOutcome::Ran => println!("{phase:<16} ran      {secs:>9.1}s"),
        PhaseOutcome::Skipped => println!("{phase:<16} skipped"),
    }
}

fn single(args: RunArgs, phase: Phase) -> Result<(), PipelineError> {
    let mut p = open(&args.config, args.overrides)?;
    let o = p.run_phase(phase)?;
    print_outcome(&p, phase, &o);
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), PipelineError> {
    match cmd {
        Command::Split(a) => single(a, Phase::Split),
        Command::TrainTarget(a) => single(a, Phase::TrainTarget),
        Command::Distill(a) => single(a, Phase::Distill),
        Command::GenAdv(a) => single(a, Phase::GenAdv),
        Command::TrainInversion(a) => single(a, Phase::TrainInversion),
        Command::Evaluate(a) => single(a, Phase::Evaluate),
        Command::Defend(a) => single(a, Phase::Defend),
        Command::Run(a) => {
            let mut p = open(&a.config, a.overrides)?;
            for (phase, o) in p.run_all()? {
                print_outcome(&p, phase, &o);
            }
            println!("run directory: {}", p.dir.display());
            Ok(())
        }
        Command::Report(a) => {
            if let Some(c) = a.config {
                return single(RunArgs { config: c, overrides: a.overrides }, Phase::Report);
            }
            if a.runs.is_empty() {
                return Err(PipelineError::Config(advinv_core::CoreError::Config(
                    "report needs --config or --runs".into(),
                )));
            }
            let written = advinv_core::report::write_report(&a.runs, &a.out)
                .map_err(|source| PipelineError::Phase { phase: Phase::Report, source })?;
            for w in written {
                println!("{}", a.out.join(w).display());
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
