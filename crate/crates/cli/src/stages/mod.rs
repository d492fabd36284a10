//! The pipeline stages and the loaders they share.

mod attribute;
mod counterfactual;
mod data;
mod decode;
mod report;

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use mine_core::attribution::AttributionRecord;
use mine_core::counterfactual::PreferenceSplit;
use mine_core::dataset::Dataset;
use mine_core::encoder::EncoderParams;
use mine_core::io::{read_checkpoint, read_json, read_jsonl, read_responses, read_tokens, SplitSpec};
use mine_core::lens::CriticalFeatureSet;
use mine_core::world::World;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};
use crate::workspace::{Freshness, Stage, Workspace};

/// What happened when a stage was asked to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Skipped,
}

/// Runs one stage unless its outputs are current.
pub fn run_stage(ws: &Workspace, stage: Stage) -> Result<Outcome> {
    ws.check_deps(stage)?;
    if ws.freshness(stage)? == Freshness::Fresh {
        eprintln!("{}: up to date", stage.name());
        return Ok(Outcome::Skipped);
    }
    let t = Instant::now();
    match stage {
        Stage::WorldGen => data::world_gen(ws)?,
        Stage::Train => data::train(ws)?,
        Stage::Eval => data::eval(ws)?,
        Stage::Attribute => attribute::attribute(ws)?,
        Stage::PatchCurve => attribute::patch_curve(ws)?,
        Stage::Decode => decode::decode(ws)?,
        Stage::Reconstruct => counterfactual::reconstruct(ws)?,
        Stage::Discriminate => counterfactual::discriminate(ws)?,
        Stage::Edit => counterfactual::edit(ws)?,
        Stage::Profile => counterfactual::profile(ws)?,
        Stage::Stats => report::stats(ws)?,
        Stage::Report => report::report(ws)?,
    }
    eprintln!("{}: done in {:.1}s", stage.name(), t.elapsed().as_secs_f64());
    Ok(Outcome::Ran)
}

/// Runs every stage in order, reusing current ones.
pub fn run_all(ws: &Workspace) -> Result<Vec<(Stage, Outcome)>> {
    Stage::ALL
        .into_iter()
        .map(|s| run_stage(ws, s).map(|o| (s, o)))
        .collect()
}

fn stage_err(stage: Stage, message: impl Into<String>) -> CliError {
    CliError::Stage {
        stage: stage.name(),
        message: message.into(),
    }
}

/// The planted world; only the synthetic mode has one.
fn world(ws: &Workspace, stage: Stage) -> Result<World> {
    if ws.config.data.tokens.is_some() {
        return Err(stage_err(
            stage,
            "needs the synthetic world's stimuli and dictionary, but data.tokens is set",
        ));
    }
    Ok(World::generate(&ws.config.world)?)
}

/// The dataset as the encoder was trained on it, labels shuffled if the
/// config asks for the control.
fn dataset(ws: &Workspace) -> Result<Dataset> {
    let tokens = read_tokens(ws.path(Stage::WorldGen, "tokens.bin"))?;
    let responses = read_responses(ws.path(Stage::WorldGen, "responses.csv"))?;
    let splits: SplitSpec = read_json(ws.path(Stage::WorldGen, "splits.json"))?;
    let ds = Dataset::new(&tokens, responses, splits)?;
    Ok(if ws.config.data.shuffle_labels {
        ds.shuffled_labels(ws.seed())
    } else {
        ds
    })
}

fn model(ws: &Workspace) -> Result<EncoderParams> {
    Ok(read_checkpoint(ws.path(Stage::Train, "checkpoint.bin"))?.params)
}

fn json_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(read_json(path)?)
}

fn jsonl_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    Ok(read_jsonl(path)?)
}

/// The part of `eval.json` later stages read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSummary {
    pub r2: BTreeMap<String, f64>,
    pub mean_test_accuracy: Option<f64>,
    pub n_voxels: usize,
    /// Voxels whose analysis-split noise ceiling clears the threshold.
    pub included_voxels: Vec<u32>,
    pub min_noise_ceiling: f64,
}

fn eval_summary(ws: &Workspace) -> Result<EvalSummary> {
    json_file(&ws.path(Stage::Eval, "eval.json"))
}

/// Attribution records indexed by `(voxel_id, image_id)`.
struct Attributions {
    records: Vec<AttributionRecord>,
    index: HashMap<(u32, u32), usize>,
}

impl Attributions {
    fn load(ws: &Workspace) -> Result<Self> {
        let records: Vec<AttributionRecord> = jsonl_file(&ws.path(Stage::Attribute, "attributions.jsonl"))?;
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.voxel_id, r.image_id), i))
            .collect();
        Ok(Self { records, index })
    }

    fn get(&self, voxel: u32, image: u32) -> Option<&AttributionRecord> {
        self.index.get(&(voxel, image)).map(|&i| &self.records[i])
    }

    fn prediction(&self, voxel: u32, image: u32, stage: Stage) -> Result<f64> {
        self.get(voxel, image)
            .map(|r| r.prediction)
            .ok_or_else(|| stage_err(stage, format!("no attribution for voxel {voxel} on image {image}")))
    }
}

/// Decoded sets and preference splits from the decode stage.
struct Decodes {
    splits: Vec<PreferenceSplit>,
    sets: HashMap<(u32, u32, mine_core::attribution::Selection), Vec<usize>>,
}

impl Decodes {
    fn load(ws: &Workspace) -> Result<Self> {
        let splits: Vec<PreferenceSplit> = jsonl_file(&ws.path(Stage::Decode, "preference.jsonl"))?;
        let all: Vec<CriticalFeatureSet> = jsonl_file(&ws.path(Stage::Decode, "critical_features.jsonl"))?;
        let sets = all
            .into_iter()
            .map(|c| ((c.voxel_id, c.image_id, c.source), c.features))
            .collect();
        Ok(Self { splits, sets })
    }

    fn get(&self, voxel: u32, image: u32, source: mine_core::attribution::Selection) -> Option<&[usize]> {
        self.sets.get(&(voxel, image, source)).map(Vec::as_slice)
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> Option<f64> {
    let (s, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| s / n as f64)
}
