use std::collections::BTreeMap;

use mine_core::encoder::EncoderParams;
use mine_core::io::{make_splits, read_responses, read_tokens, write_checkpoint, write_responses, write_tokens, Checkpoint, TokenTensor};
use mine_core::seed::{derive_seed, ENCODER_INIT, SPLITS};
use mine_core::train::{evaluate_r2, prediction_accuracy, train as fit};
use mine_core::world::{StimulusSpec, VoxelSpec, World, WorldDocument};
use serde::Serialize;
use serde_json::json;

use super::{dataset, mean, model, EvalSummary};
use crate::error::Result;
use crate::workspace::{Stage, Workspace};

#[derive(Serialize)]
struct WorldFile<'a> {
    #[serde(flatten)]
    document: WorldDocument,
    voxels: &'a [VoxelSpec],
    /// Per-voxel hit rate over all images.
    hit_rates: Vec<f64>,
}

pub(super) fn world_gen(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let mut out = ws.begin(Stage::WorldGen)?;
    let (tokens, responses) = match (&cfg.data.tokens, &cfg.data.responses) {
        (Some(t), Some(r)) => (read_tokens(t)?, read_responses(r)?),
        _ => {
            let world = World::generate(&cfg.world)?;
            let all: Vec<usize> = (0..world.stimuli.len()).collect();
            out.json(
                "world.json",
                &WorldFile {
                    document: world.document(),
                    voxels: &world.voxels,
                    hit_rates: world.hit_rates(&all),
                },
            )?;
            out.jsonl::<StimulusSpec>("stimuli.jsonl", &world.stimuli)?;
            let ids = (0..world.stimuli.len() as u32).collect();
            (TokenTensor::from_f64(ids, &world.render_all()?)?, world.responses())
        }
    };
    let splits = make_splits(&tokens.image_ids, cfg.data.splits, derive_seed(ws.seed(), &[SPLITS]))?;
    // join check before anything is written downstream
    mine_core::dataset::Dataset::new(&tokens, responses.clone(), splits.clone())?;
    write_tokens(out.file("tokens.bin"), &tokens)?;
    write_responses(out.file("responses.csv"), &responses)?;
    out.json("splits.json", &splits)?;
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct TrainSummary {
    best_epoch: usize,
    best_val_r2: f64,
    epochs: usize,
    steps: usize,
    shuffled_labels: bool,
}

pub(super) fn train(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let ds = dataset(ws)?;
    let enc = cfg.model.encoder(ds.token_dim(), ds.n_voxels());
    let init = EncoderParams::init(&enc, derive_seed(ws.seed(), &[ENCODER_INIT]))?;
    let outcome = fit(init, &ds, &cfg.train, |e| {
        if let Some(r) = e.val_r2 {
            eprintln!("train: epoch {} step {} loss {:.5} val R̄² {:.4}", e.epoch, e.step, e.loss, r);
        }
    })?;
    let mut out = ws.begin(Stage::Train)?;
    write_checkpoint(
        out.file("checkpoint.bin"),
        &Checkpoint {
            params: outcome.best,
            epoch: outcome.best_epoch,
            seed: ws.seed(),
            hyperparameters: json!({
                "model": cfg.model,
                "train": cfg.train,
                "config_hash": ws.config_hash,
            }),
        },
    )?;
    out.jsonl("train_log.jsonl", &outcome.log)?;
    out.json(
        "train.json",
        &TrainSummary {
            best_epoch: outcome.best_epoch,
            best_val_r2: outcome.best_val_r2,
            epochs: cfg.train.epochs,
            steps: outcome.log.len(),
            shuffled_labels: cfg.data.shuffle_labels,
        },
    )?;
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct VoxelRow {
    voxel_id: u32,
    noise_ceiling_test: Option<f64>,
    noise_ceiling_analysis: Option<f64>,
    r2_val: Option<f64>,
    r2_test: Option<f64>,
    r2_analysis: Option<f64>,
    accuracy_test: Option<f64>,
    included: bool,
}

pub(super) fn eval(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let ds = dataset(ws)?;
    let params = model(ws)?;
    let n_vox = ds.n_voxels();
    let mut r2 = BTreeMap::new();
    let mut per_split = BTreeMap::new();
    for name in ["train", "val", "test", "analysis"] {
        if ds.split_rows(name)?.is_empty() {
            continue;
        }
        let rep = evaluate_r2(&params, &ds, name)?;
        r2.insert(name.to_string(), rep.mean);
        per_split.insert(name, rep.per_voxel);
    }
    let ceilings = |name: &str| -> Result<Option<Vec<f64>>> {
        let rows = ds.split_rows(name)?;
        Ok(if rows.len() > 1 { Some(ds.noise_ceilings(&rows)?) } else { None })
    };
    let nc_test = ceilings("test")?;
    let nc_analysis = ceilings("analysis")?;
    let accuracy = match (per_split.get("test"), &nc_test) {
        (Some(r), Some(nc)) => prediction_accuracy(r, nc),
        _ => vec![None; n_vox],
    };
    let at = |m: Option<&Vec<Option<f64>>>, v: usize| m.and_then(|x| x[v]);
    let rows: Vec<VoxelRow> = (0..n_vox)
        .map(|v| {
            let nca = nc_analysis.as_ref().map(|n| n[v]);
            VoxelRow {
                voxel_id: ds.voxel_ids()[v],
                noise_ceiling_test: nc_test.as_ref().map(|n| n[v]),
                noise_ceiling_analysis: nca,
                r2_val: at(per_split.get("val"), v),
                r2_test: at(per_split.get("test"), v),
                r2_analysis: at(per_split.get("analysis"), v),
                accuracy_test: accuracy[v],
                included: nca.is_some_and(|n| n >= cfg.attribution.min_noise_ceiling),
            }
        })
        .collect();
    let summary = EvalSummary {
        r2,
        mean_test_accuracy: mean(accuracy.iter().flatten().copied()),
        n_voxels: n_vox,
        included_voxels: rows.iter().filter(|r| r.included).map(|r| r.voxel_id).collect(),
        min_noise_ceiling: cfg.attribution.min_noise_ceiling,
    };
    eprintln!(
        "eval: R̄² {:?}, {} of {} voxels included",
        summary.r2,
        summary.included_voxels.len(),
        n_vox
    );
    let mut out = ws.begin(Stage::Eval)?;
    out.json("eval.json", &summary)?;
    out.csv("voxels.csv", &rows)?;
    out.finish()?;
    Ok(())
}
