use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lintransfer::config::RunConfig;
use lintransfer::eval::ablation_table;
use lintransfer::pipeline::{ModelChoice, Run};
use lintransfer::transfer::Objective;
use lintransfer::Error;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  internal error (shape mismatch, non-finite value, invalid argument)
  2  invalid configuration or command line
  3  missing input file (run the earlier stage first)
  4  I/O error
  5  training diverged
  6  malformed checkpoint, trajectory or sample file";

/// Data-free selective transfer of a toy flow transformer from softmax to
/// linear attention.
#[derive(Parser, Debug)]
#[command(name = "lintransfer", version, after_help = EXIT_CODES)]
struct Cli {
    /// TOML config; keys not given take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory every stage reads its inputs from and writes into.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Number of layers to convert to linear attention.
    #[arg(long, global = true)]
    target: Option<usize>,

    #[arg(long, global = true)]
    lambda: Option<f64>,

    #[arg(long, global = true)]
    alpha_start: Option<f64>,

    #[arg(long, global = true)]
    alpha_end: Option<f64>,

    /// Optimizer steps of the command's training stage.
    #[arg(long, global = true)]
    steps: Option<usize>,

    #[arg(long, global = true, value_parser = ["adm", "mse"])]
    objective: Option<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train the softmax teacher with flow matching.
    TrainTeacher,
    /// Integrate the teacher from noise and store its trajectories.
    Collect {
        /// Print trajectory statistics afterwards.
        #[arg(long)]
        stats: bool,
    },
    /// Print statistics of the stored trajectories.
    Stats,
    /// Selective transfer into a mixed softmax/linear student.
    Transfer,
    /// Round the student's selection scores and drop unused branches.
    Finalize,
    /// Draw samples from a stored model.
    Sample {
        #[arg(long, default_value = "finalized", value_parser = ["teacher", "student", "finalized"])]
        model: String,
    },
    /// Time softmax and linear attention across sequence lengths.
    BenchAttn,
    /// Compare the student and its finalized form against the teacher.
    Eval,
    /// Run the ablation grid over target, lambda, regularization and objective.
    Ablate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Shape { .. } | Error::NonFinite(_) | Error::InvalidArgument(_) => 1,
        Error::Config(_) => 2,
        Error::MissingInput(_) => 3,
        Error::Io(_) => 4,
        Error::Divergence { .. } => 5,
        Error::Format(_) => 6,
    }
}

fn resolve(cli: &Cli) -> lintransfer::Result<RunConfig> {
    let mut c = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(v) = cli.seed {
        c.seed = v;
    }
    if let Some(v) = cli.target {
        c.target = v;
    }
    if let Some(v) = cli.lambda {
        c.lambda = v;
    }
    if let Some(v) = cli.alpha_start {
        c.alpha_start = v;
    }
    if let Some(v) = cli.alpha_end {
        c.alpha_end = v;
    }
    if let Some(v) = &cli.objective {
        c.objective = v.parse::<Objective>()?;
    }
    if let Some(v) = cli.steps {
        match cli.command {
            Command::TrainTeacher => c.teacher_steps = v,
            _ => c.transfer_steps = v,
        }
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> lintransfer::Result<()> {
    let run = Run::new(resolve(cli)?, &cli.out)?;
    match &cli.command {
        Command::TrainTeacher => println!("{}", run.train_teacher()?),
        Command::Collect { stats } => {
            println!("{}", run.collect()?);
            if *stats {
                print!("{}", run.stats()?);
            }
        }
        Command::Stats => print!("{}", run.stats()?),
        Command::Transfer => println!("{}", run.transfer()?),
        Command::Finalize => println!("{}", run.finalize()?),
        Command::Sample { model } => println!("{}", run.sample(model.parse::<ModelChoice>()?)?),
        Command::BenchAttn => {
            let report = run.bench_attention()?;
            println!("{:>8} {:>12} {:>12}", "n", "softmax s", "linear s");
            for (i, n) in report.kernels[0].n.iter().enumerate() {
                println!(
                    "{n:>8} {:>12.6} {:>12.6}",
                    report.kernels[0].median_secs[i], report.kernels[1].median_secs[i]
                );
            }
            for k in &report.kernels {
                let flag = if k.low_resolution { " (near timer resolution)" } else { "" };
                println!("{} slope {:.3}{flag}", k.kernel, k.slope);
            }
        }
        Command::Eval => {
            let report = run.eval()?;
            println!("config {} seed {}", report.fingerprint, report.seed);
            for (name, value) in &report.metrics {
                println!("{name:<34} {value:.6}");
            }
        }
        Command::Ablate => {
            let rows = run.ablate(|row| {
                eprintln!(
                    "cell target={} lambda={} reg={} objective={:?} seed={} done in {:.0}s",
                    row.cell.target, row.cell.lambda, row.cell.regularization, row.cell.objective, row.cell.seed, row.wall_secs
                )
            })?;
            print!("{}", ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
