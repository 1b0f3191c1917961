use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dfuse::commands::{self, Globals};
use dfuse::{CliError, GanMode};

#[derive(Parser, Debug)]
#[command(name = "dfuse", version, about = "Domain-fusion GAN augmentation experiments")]
struct Cli {
    #[command(flatten)]
    globals: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalArgs {
    /// Experiment configuration file (a run manifest also works).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed for every random stream.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress progress messages.
    #[arg(long, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the target and candidate outer datasets.
    Synth,
    /// Rank candidate outer datasets by the metric M and print the best path.
    RankOuter {
        #[arg(long)]
        target: PathBuf,
        #[arg(long = "candidate")]
        candidates: Vec<PathBuf>,
        /// Precomputed M values, one per candidate, instead of computing them.
        #[arg(long, value_delimiter = ',')]
        scores: Option<Vec<f64>>,
        /// Saved reference extractor; trained on the fly when absent.
        #[arg(long)]
        extractor: Option<PathBuf>,
    },
    /// Train a GAN in cgan, tgan or df mode.
    TrainGan {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        outer: Option<PathBuf>,
        /// Overrides `gan.mode` of the configuration.
        #[arg(long)]
        mode: Option<GanMode>,
    },
    /// Draw target-class samples from a checkpoint, optionally DRS-filtered.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        n_per_class: usize,
        #[arg(long)]
        drs: bool,
        /// Real target images for calibration-head training (DRS only).
        #[arg(long)]
        target: Option<PathBuf>,
    },
    /// Train and evaluate classifiers with and without generated data.
    AugmentEval {
        #[arg(long)]
        target: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Full comparison of CGAN, TGAN and DF over all replicate seeds.
    Pipeline,
    /// Aggregate summary tables or render a dataset as a sample grid.
    Report {
        #[arg(long = "summary")]
        summaries: Vec<PathBuf>,
        #[arg(long)]
        grid: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let g = Globals {
        config: cli.globals.config,
        seed: cli.globals.seed,
        out: cli.globals.out,
        quiet: cli.globals.quiet,
    };
    match cli.command {
        Command::Synth => {
            for p in commands::synth(&g)? {
                println!("{}", p.display());
            }
        }
        Command::RankOuter {
            target,
            candidates,
            scores,
            extractor,
        } => {
            let best = commands::rank_outer(&g, &target, &candidates, scores.as_deref(), extractor.as_deref())?;
            println!("{}", best.display());
        }
        Command::TrainGan { target, outer, mode } => {
            let ckpt = commands::train_gan(&g, &target, outer.as_deref(), mode)?;
            println!("{}", ckpt.display());
        }
        Command::Sample {
            checkpoint,
            n_per_class,
            drs,
            target,
        } => {
            let path = commands::sample(&g, &checkpoint, n_per_class, drs, target.as_deref())?;
            println!("{}", path.display());
        }
        Command::AugmentEval {
            target,
            test,
            checkpoint,
        } => {
            let path = commands::augment_eval(&g, &target, &test, checkpoint.as_deref())?;
            print!("{}", std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?);
        }
        Command::Pipeline => {
            let out = commands::pipeline(&g)?;
            print!("{}", out.summary);
        }
        Command::Report { summaries, grid } => {
            if let Some(table) = commands::report(&g, &summaries, grid.as_deref())? {
                print!("{table}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(dfuse::EXIT_CONFIG as u8),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
