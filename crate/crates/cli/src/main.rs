use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use crossdiff_cli::ablate::{module_axes, Axis};
use crossdiff_cli::eval::Source;
use crossdiff_cli::filter::FilterArgs;
use crossdiff_cli::scenes::Split;
use crossdiff_cli::{ablate, eval, filter, gradcheck, scenes, train, Common};
use crossdiff_core::config::RunConfig;
use crossdiff_core::gradsuite::GradTarget;

#[derive(Parser)]
#[command(
    name = "crossdiff",
    version,
    about = "Cross-modal differential attention grounding toolkit"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key = value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Replace a completed output directory
    #[arg(long, global = true)]
    force: bool,
    /// Extra `key=value` settings, applied after the config file
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Central-difference gradient checks; exits 1 on any failure
    Gradcheck {
        /// Restrict to one check: diffattn, lda, dice, iou, geom or model
        #[arg(long)]
        only: Option<GradTarget>,
    },
    /// Write the training and held-out scene corpora
    GenScenes,
    /// Train into `<out>/<config hash>`
    Train,
    /// Evaluate a finished run, or score a predictions file
    Eval {
        /// Training run directory
        #[arg(
            long,
            conflicts_with = "predictions",
            required_unless_present = "predictions"
        )]
        run: Option<PathBuf>,
        /// JSONL predictions in corpus order
        #[arg(long)]
        predictions: Option<PathBuf>,
        #[arg(long, default_value = "eval")]
        split: Split,
    },
    /// Rule-first implicit-relation filtering of a referring corpus
    FilterImplicit {
        /// JSONL records with scene_id, object_id, ann_id, description, split
        #[arg(long)]
        input: PathBuf,
        /// Pattern library TOML (built-in default otherwise)
        #[arg(long)]
        patterns: Option<PathBuf>,
        /// Prompt template with a `{text}` slot
        #[arg(long)]
        prompt: Option<PathBuf>,
    },
    /// Train a grid of settings over several seeds and compare held-out metrics
    Ablate {
        /// `key=v1,v2`; repeatable. Default: plda, clda and dgtl on/off
        #[arg(long = "axis")]
        axes: Vec<Axis>,
        /// Seeds per grid point
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Print every config key with its default
    Defaults,
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    let g = cli.global;
    let common = Common::build(g.config.as_deref(), &g.set, g.seed, g.out, g.force)?;
    match cli.cmd {
        Command::Gradcheck { only } => {
            if !gradcheck::run(&common, only)? {
                return Ok(ExitCode::from(1));
            }
        }
        Command::GenScenes => scenes::run(&common)?,
        Command::Train => {
            let o = train::run(&common)?;
            print!("{}", o.evaluation.report.table());
            println!("{} ({:.1}s)", o.dir.display(), o.elapsed.as_secs_f64());
        }
        Command::Eval {
            run,
            predictions,
            split,
        } => {
            let source = match (&run, &predictions) {
                (Some(r), _) => Source::Run(r),
                (None, Some(p)) => Source::Predictions(p),
                (None, None) => unreachable!("clap enforces one source"),
            };
            eval::run(&common, source, split)?;
        }
        Command::FilterImplicit {
            input,
            patterns,
            prompt,
        } => {
            filter::run(
                &common,
                &FilterArgs {
                    input: &input,
                    patterns: patterns.as_deref(),
                    prompt: prompt.as_deref(),
                },
            )?;
        }
        Command::Ablate { axes, seeds } => {
            let axes = if axes.is_empty() { module_axes() } else { axes };
            ablate::run(&common, &axes, &seeds)?;
        }
        Command::Defaults => print!("{}", RunConfig::documented_defaults()),
    }
    Ok(ExitCode::SUCCESS)
}
