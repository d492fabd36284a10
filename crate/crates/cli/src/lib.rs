//! Drives the encoder-explanation pipeline from one JSON configuration:
//! world generation, training, attribution, decoding, counterfactual
//! evaluation, profiling, mixed-model statistics and the final report.

pub mod analysis;
pub mod config;
pub mod error;
pub mod stages;
pub mod workspace;

pub use config::PipelineConfig;
pub use error::{CliError, Result};
pub use stages::{run_all, run_stage, Outcome};
pub use workspace::{Stage, Workspace};

/// Runs one stage, or every stage when `stage` is `None`, on a pool of
/// `workers` threads. Parallel sections collect in input order, so the
/// worker count never changes an output byte.
pub fn execute(ws: &Workspace, stage: Option<Stage>, workers: usize) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Stage {
            stage: "setup",
            message: format!("thread pool: {e}"),
        })?;
    pool.install(|| match stage {
        Some(s) => run_stage(ws, s).map(|_| ()),
        None => run_all(ws).map(|_| ()),
    })
}
