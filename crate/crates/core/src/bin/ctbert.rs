use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ctbert::config::RunConfig;
use ctbert::ingest::Split;
use ctbert::phantom::{write_seg_corpus, write_synthetic_dataset};
use ctbert::pipeline::{Pipeline, Stage};
use ctbert::Error;

#[derive(Parser)]
#[command(name = "ctbert", version, about = "CT-volume COVID-19 classification pipeline")]
struct Cli {
    /// Run configuration (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    /// Re-run a stage even if it already completed.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Scan the dataset splits and write manifests.
    Preprocess,
    /// Train the lung segmentation network.
    TrainUnet,
    /// Segment, select and compose slices for every volume.
    Segment,
    /// Train the 3D CNN with attention pooling.
    TrainClassifier,
    /// Export per-set embeddings to the feature cache.
    ExtractFeatures,
    /// Train the pooled-embedding MLP.
    TrainMlp,
    /// Score predictions on the labeled splits.
    Evaluate,
    /// Write predictions for the test split.
    Predict,
    /// Run every stage in order.
    All,
    /// Write a synthetic phantom dataset and segmentation corpus.
    Synth {
        /// Destination directory.
        dir: PathBuf,
        #[arg(long, default_value_t = 5)]
        per_class: usize,
        #[arg(long, default_value_t = 20)]
        seg_pairs: usize,
        #[arg(long, default_value_t = 40)]
        min_slices: usize,
        #[arg(long, default_value_t = 60)]
        max_slices: usize,
    },
    /// Print the effective configuration.
    ShowConfig,
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::Preprocess => Stage::Preprocess,
        Command::TrainUnet => Stage::TrainUnet,
        Command::Segment => Stage::Segment,
        Command::TrainClassifier => Stage::TrainClassifier,
        Command::ExtractFeatures => Stage::ExtractFeatures,
        Command::TrainMlp => Stage::TrainMlp,
        Command::Evaluate => Stage::Evaluate,
        Command::Predict => Stage::Predict,
        _ => return None,
    })
}

fn run(cli: Cli) -> ctbert::Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output_dir = o.clone();
    }
    match &cli.command {
        Command::Synth {
            dir,
            per_class,
            seg_pairs,
            min_slices,
            max_slices,
        } => {
            if min_slices >= max_slices {
                return Err(Error::Config("--min-slices must be below --max-slices".into()));
            }
            let n = write_synthetic_dataset(
                &dir.join("data"),
                &[Split::Train, Split::Val, Split::Test],
                *per_class,
                *min_slices..*max_slices,
                cfg.seed,
            )?;
            write_seg_corpus(&dir.join("seg"), *seg_pairs, cfg.seed.wrapping_add(1))?;
            println!("wrote {n} volumes and {seg_pairs} segmentation pairs under {}", dir.display());
            Ok(())
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml()?);
            Ok(())
        }
        Command::All => {
            let pipeline = Pipeline::new(cfg, cli.force);
            for outcome in pipeline.run_all()? {
                report(&outcome);
            }
            Ok(())
        }
        cmd => {
            let stage = stage_of(cmd).expect("stage command");
            let outcome = Pipeline::new(cfg, cli.force).run(stage)?;
            report(&outcome);
            Ok(())
        }
    }
}

fn report(outcome: &ctbert::pipeline::StageOutcome) {
    let status = if outcome.reused { "already complete" } else { "done" };
    println!("{}: {status}", outcome.stage);
    for p in &outcome.produced {
        println!("  {}", p.display());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
