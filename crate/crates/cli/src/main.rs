use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use tempo_ode::checkpoint::Checkpoint;
use tempo_ode::config::RunConfig;
use tempo_ode::training::Task;
use tempo_ode_cli::{
    cmd_bench_overhead, cmd_eval, cmd_export_trajectory, cmd_generate, cmd_param_count, cmd_train,
    EvalData, SplitPart, TimesSpec, TrainPaths,
};

#[derive(Parser)]
#[command(
    name = "tempo-ode",
    version,
    about = "Latent ODEs with temporal weights"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Reconstruction,
    Extrapolation,
    Classification,
    PerTimeClassification,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartArg {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset, its heldout sibling and a stats sidecar.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the synthetic seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train; writes config.json, metrics.jsonl, best.ckpt.json and
    /// final.ckpt.json into --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
        /// Resume from this checkpoint; epoch numbering continues.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print metrics of a checkpoint as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV dataset to score; default is the checkpoint config's data.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: PartArg,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        /// Cut time for --task extrapolation.
        #[arg(long)]
        cut: Option<f64>,
        #[arg(long)]
        per_sample: bool,
    },
    /// Decoded trajectory of one sample as CSV.
    ExportTrajectory {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sample: String,
        /// `observed`, `uniform:N` or a comma-separated list.
        #[arg(long, default_value = "observed")]
        times: TimesSpec,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "all")]
        split: PartArg,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-component parameter counts of `model` and `baseline`.
    ParamCount {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Median epoch time of `model` against `baseline` (or its static twin).
    BenchOverhead {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 5)]
        epochs: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn part(p: PartArg) -> SplitPart {
    match p {
        PartArg::Train => SplitPart::Train,
        PartArg::Validation => SplitPart::Validation,
        PartArg::Test => SplitPart::Test,
        PartArg::All => SplitPart::All,
    }
}

fn task(t: TaskArg, cut: Option<f64>) -> Result<Task, String> {
    Ok(match t {
        TaskArg::Reconstruction => Task::Reconstruction,
        TaskArg::Extrapolation => Task::Extrapolation {
            cut: cut.ok_or("--task extrapolation needs --cut")?,
        },
        TaskArg::Classification => Task::Classification,
        TaskArg::PerTimeClassification => Task::PerTimeClassification,
    })
}

fn load_config(path: &PathBuf, seed: Option<u64>) -> tempo_ode::Result<RunConfig> {
    let cfg = RunConfig::load(path)?;
    Ok(match seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn run(cli: Cli) -> tempo_ode::Result<()> {
    match cli.command {
        Command::Generate { config, out, seed } => {
            let mut cfg = RunConfig::load(&config)?;
            if let (Some(s), Some(spec)) = (seed, cfg.data.synthetic.as_mut()) {
                spec.seed = s;
            }
            let stats = cmd_generate(&cfg, &out)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
        }
        Command::Train {
            config,
            out,
            checkpoint,
            seed,
        } => {
            let cfg = load_config(&config, seed)?;
            let resume = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let summary = cmd_train(&cfg, &TrainPaths::new(out), resume.as_ref())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            task: t,
            cut,
            per_sample,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let t = t
                .map(|t| task(t, cut))
                .transpose()
                .map_err(tempo_ode::Error::InvalidArgument)?;
            let source = match &data {
                Some(p) => EvalData::Csv(p),
                None => EvalData::Config(part(split)),
            };
            let report = cmd_eval(&ck, &source, t, per_sample)?;
            let text = if per_sample {
                serde_json::to_string_pretty(&report)?
            } else {
                serde_json::to_string_pretty(&report.metrics)?
            };
            println!("{text}");
        }
        Command::ExportTrajectory {
            checkpoint,
            sample,
            times,
            data,
            split,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let source = match &data {
                Some(p) => EvalData::Csv(p),
                None => EvalData::Config(part(split)),
            };
            let csv = cmd_export_trajectory(&ck, &source, &sample, &times)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::ParamCount { config, json } => {
            let report = cmd_param_count(&RunConfig::load(&config)?)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.render());
            }
        }
        Command::BenchOverhead {
            config,
            epochs,
            seed,
        } => {
            let report = cmd_bench_overhead(&load_config(&config, seed)?, epochs)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
