//! `projseg`: generate, render, train, label and export mesh segmentations.
//!
//! Every subcommand works on a dataset directory. Settings come from an
//! optional TOML config file; the flags below override it.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use projseg::pipeline::{self, PipelineConfig, Split};
use projseg::synth::ShapeFamily;
use projseg::train::TrainMode;

#[derive(Parser)]
#[command(name = "projseg", version, about = "Multi-view mesh part segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with `key = value` settings.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    mode: Option<Mode>,
    /// Use the 20 dodecahedron viewpoints instead of greedy selection.
    #[arg(long, global = true)]
    fixed_views: bool,
    /// Render a third input channel with the height above the ground.
    #[arg(long, global = true)]
    upright_height: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Joint,
    Disjoint,
    UnaryOnly,
}

impl From<Mode> for TrainMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Joint => TrainMode::Joint,
            Mode::Disjoint => TrainMode::Disjoint,
            Mode::UnaryOnly => TrainMode::UnaryOnly,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Write procedural shapes with ground-truth labels and a manifest.
    Generate {
        dataset: PathBuf,
        /// table, mug or chair.
        #[arg(long, default_value = "table")]
        family: String,
        #[arg(long, default_value_t = 20)]
        count: usize,
    },
    /// Select viewpoints for every shape.
    Views { dataset: PathBuf },
    /// Render shaded, depth and reference images for every shape.
    Render { dataset: PathBuf },
    /// Train on the train split.
    Train { dataset: PathBuf },
    /// Label shapes with the trained model.
    Infer {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Skip the CRF pairwise terms.
        #[arg(long)]
        unary_only: bool,
    },
    /// Print per-category and averaged accuracy of stored predictions.
    Eval {
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        #[arg(long)]
        unary_only: bool,
    },
    /// Write colored PLY meshes of the predictions.
    Export {
        dataset: PathBuf,
        /// Color by ground truth instead of predictions.
        #[arg(long)]
        truth: bool,
        #[arg(long)]
        unary_only: bool,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(mode) = common.mode {
        cfg.mode = mode.into();
    }
    cfg.fixed_views |= common.fixed_views;
    cfg.upright_height |= common.upright_height;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.common)?;
    let ctx = |stage: &str, dir: &Path| format!("{stage} failed for {}", dir.display());
    match cli.command {
        Command::Generate { dataset, family, count } => {
            let family: ShapeFamily = family.parse()?;
            let manifest =
                pipeline::cmd_generate(family, count, &cfg, &dataset).with_context(|| ctx("generate", &dataset))?;
            let train = manifest.split(Some(Split::Train)).count();
            println!(
                "generated {} shapes ({train} train, {} test)",
                manifest.shapes.len(),
                manifest.shapes.len() - train
            );
        }
        Command::Views { dataset } => {
            pipeline::cmd_views(&dataset, &cfg).with_context(|| ctx("views", &dataset))?;
        }
        Command::Render { dataset } => {
            pipeline::cmd_render(&dataset, &cfg).with_context(|| ctx("render", &dataset))?;
        }
        Command::Train { dataset } => {
            let trainer = pipeline::cmd_train(&dataset, &cfg).with_context(|| ctx("train", &dataset))?;
            if let Some(last) = trainer.log.last() {
                println!(
                    "trained {} epochs, {} steps; last nll {:.4}",
                    trainer.checkpoint.epoch, trainer.checkpoint.step, last.nll
                );
            }
        }
        Command::Infer {
            dataset,
            split,
            unary_only,
        } => {
            pipeline::cmd_infer(&dataset, &cfg, split.split(), unary_only).with_context(|| ctx("infer", &dataset))?;
        }
        Command::Eval {
            dataset,
            split,
            unary_only,
        } => {
            let eval =
                pipeline::cmd_eval(&dataset, split.split(), unary_only).with_context(|| ctx("eval", &dataset))?;
            print!("{}", eval.table());
        }
        Command::Export {
            dataset,
            truth,
            unary_only,
        } => {
            let paths =
                pipeline::cmd_export(&dataset, &cfg, truth, unary_only).with_context(|| ctx("export", &dataset))?;
            println!("exported {} meshes", paths.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
