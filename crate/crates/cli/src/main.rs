use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mine_cli::{execute, CliError, PipelineConfig, Stage, Workspace};

#[derive(Parser)]
#[command(name = "mine", version, about = "Train voxel encoders on token sequences and explain them")]
struct Cli {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed; every random stream derives from it.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Worker threads within a stage (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    workers: Option<usize>,
    /// Output root (default: the config's `out`, then $MINE_OUT, then ./mine-out).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Overrides {
    /// Config overrides as dotted keys, e.g. train.epochs=4 world.n_images=500.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic world (or ingest tokens and responses) and the splits.
    WorldGen(Overrides),
    /// Train the encoder.
    Train(Overrides),
    /// Score the encoder per split and select voxels by noise ceiling.
    Eval(Overrides),
    /// Integrated gradients for every voxel on every analysis image.
    Attribute(Overrides),
    /// Necessity and sufficiency curves under mean-token patching.
    PatchCurve(Overrides),
    /// Decode critical features from the top tokens of preferred images.
    Decode(Overrides),
    /// Regenerate stimuli from decoded features and score their predictions.
    Reconstruct(Overrides),
    /// Compare regenerations from preferred and non-preferred decodes.
    Discriminate(Overrides),
    /// Remove and add decoded features; measure faithfulness.
    Edit(Overrides),
    /// Build voxel profiles and test profile-based edits.
    Profile(Overrides),
    /// Fit the mixed models behind every comparison.
    Stats(Overrides),
    /// Write the JSON summary and the CSVs behind each comparison.
    Report(Overrides),
    /// Every stage in order, reusing current outputs.
    Run(Overrides),
}

impl Command {
    fn split(self) -> (Option<Stage>, Vec<String>) {
        use Command::*;
        let (stage, o) = match self {
            WorldGen(o) => (Some(Stage::WorldGen), o),
            Train(o) => (Some(Stage::Train), o),
            Eval(o) => (Some(Stage::Eval), o),
            Attribute(o) => (Some(Stage::Attribute), o),
            PatchCurve(o) => (Some(Stage::PatchCurve), o),
            Decode(o) => (Some(Stage::Decode), o),
            Reconstruct(o) => (Some(Stage::Reconstruct), o),
            Discriminate(o) => (Some(Stage::Discriminate), o),
            Edit(o) => (Some(Stage::Edit), o),
            Profile(o) => (Some(Stage::Profile), o),
            Stats(o) => (Some(Stage::Stats), o),
            Report(o) => (Some(Stage::Report), o),
            Run(o) => (None, o),
        };
        (stage, o.overrides)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (stage, mut overrides) = cli.command.split();
    if let Some(seed) = cli.seed {
        overrides.push(format!("seed={seed}"));
    }
    let result = PipelineConfig::load(cli.config.as_deref(), &overrides).and_then(|cfg| {
        let root = cfg.resolve_out(cli.out.as_deref());
        let ws = Workspace::new(root, cfg);
        let workers = cli
            .workers
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
        execute(&ws, stage, workers)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                CliError::Validation(_) => 2,
                CliError::Dependency { .. } | CliError::Stale { .. } => 3,
                _ => 1,
            })
        }
    }
}
