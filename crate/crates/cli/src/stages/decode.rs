use std::collections::BTreeMap;

use mine_core::attribution::Selection;
use mine_core::counterfactual::{select_preference, PreferenceSplit};
use mine_core::lens::{decode_selection, recovery_score, CriticalFeatureSet, VocabularyProjector};
use mine_core::seed::{rng_for, DECODE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dataset, eval_summary, mean, stage_err, world, Attributions};
use crate::error::Result;
use crate::workspace::{Stage, Workspace};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub voxel_id: u32,
    pub source: Selection,
    pub precision: f64,
    pub recall: f64,
    pub n_scored: usize,
    pub n_without_target: usize,
}

#[derive(Serialize)]
struct SourceRecovery {
    /// Mean over voxels of the per-voxel mean precision on preferred images.
    precision: f64,
    recall: f64,
    n_voxels: usize,
}

#[derive(Serialize)]
struct DecodeSummary {
    k_top: usize,
    n_features_out: usize,
    n_voxels_decoded: usize,
    /// Included voxels without both preferred and non-preferred images.
    skipped_voxels: Vec<u32>,
    recovery: BTreeMap<&'static str, SourceRecovery>,
}

struct VoxelDecode {
    split: PreferenceSplit,
    sets: Vec<CriticalFeatureSet>,
}

pub(super) fn decode(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let world = world(ws, Stage::Decode)?;
    let ds = dataset(ws)?;
    let attr = Attributions::load(ws)?;
    let included = eval_summary(ws)?.included_voxels;
    let projector = VocabularyProjector::from_dictionary(&world.dictionary)?;
    let n_out = cfg.decode.resolved_n_out(cfg.world.critical_cap);
    let rows = ds.split_rows("analysis")?;
    let k = cfg.attribution.k_top;

    let decoded: Vec<Option<VoxelDecode>> = included
        .par_iter()
        .map(|&v| {
            let col = ds
                .voxel_ids()
                .iter()
                .position(|&id| id == v)
                .ok_or_else(|| stage_err(Stage::Decode, format!("voxel {v} is not in the dataset")))?;
            let responses: Vec<(u32, f64)> = rows.iter().map(|&r| (ds.image_ids()[r], ds.target(r, col))).collect();
            let split = match select_preference(v, &responses, cfg.counterfactual.q_hi, cfg.counterfactual.q_lo) {
                Ok(s) => s,
                Err(mine_core::Error::InsufficientData(_)) => return Ok(None),
                Err(e) => return Err(e.into()),
            };
            let mut sets = Vec::new();
            let jobs = split
                .preferred
                .iter()
                .map(|&i| (i, &Selection::ALL[..]))
                .chain(split.non_preferred.iter().map(|&i| (i, &[Selection::TopIg][..])));
            for (image, sources) in jobs {
                let scores = &attr
                    .get(v, image)
                    .ok_or_else(|| stage_err(Stage::Decode, format!("no attribution for voxel {v} on image {image}")))?
                    .scores;
                let tokens = ds.tokens(ds.row(image)?);
                let mut rng = rng_for(ws.seed(), &[DECODE, v as u64, image as u64]);
                for &source in sources {
                    sets.push(decode_selection(
                        v, image, tokens, scores, k, source, &projector, &cfg.decode, n_out, &mut rng,
                    )?);
                }
            }
            Ok(Some(VoxelDecode { split, sets }))
        })
        .collect::<Result<_>>()?;

    let mut skipped = Vec::new();
    let mut splits = Vec::new();
    let mut sets = Vec::new();
    for (v, d) in included.iter().zip(decoded) {
        match d {
            Some(d) => {
                splits.push(d.split);
                sets.extend(d.sets);
            }
            None => skipped.push(*v),
        }
    }

    let preferred: std::collections::HashSet<(u32, u32)> = splits
        .iter()
        .flat_map(|s| s.preferred.iter().map(move |&i| (s.voxel_id, i)))
        .collect();
    let mut recovery_rows = Vec::new();
    let mut recovery = BTreeMap::new();
    for source in Selection::ALL {
        let scored: Vec<CriticalFeatureSet> = sets
            .iter()
            .filter(|c| c.source == source && preferred.contains(&(c.voxel_id, c.image_id)))
            .cloned()
            .collect();
        let per_voxel = recovery_score(&scored, Some(&world))?;
        let valid: Vec<_> = per_voxel.iter().filter(|r| r.n_scored > 0).collect();
        recovery.insert(
            source.label(),
            SourceRecovery {
                precision: mean(valid.iter().map(|r| r.precision)).unwrap_or(f64::NAN),
                recall: mean(valid.iter().map(|r| r.recall)).unwrap_or(f64::NAN),
                n_voxels: valid.len(),
            },
        );
        recovery_rows.extend(per_voxel.into_iter().map(|r| RecoveryRow {
            voxel_id: r.voxel_id,
            source,
            precision: r.precision,
            recall: r.recall,
            n_scored: r.n_scored,
            n_without_target: r.n_without_target,
        }));
    }
    for (label, r) in &recovery {
        eprintln!("decode: {label} precision {:.3} recall {:.3} over {} voxels", r.precision, r.recall, r.n_voxels);
    }
    let summary = DecodeSummary {
        k_top: k,
        n_features_out: n_out,
        n_voxels_decoded: splits.len(),
        skipped_voxels: skipped,
        recovery,
    };
    let mut out = ws.begin(Stage::Decode)?;
    out.jsonl("preference.jsonl", &splits)?;
    out.jsonl("critical_features.jsonl", &sets)?;
    out.csv("recovery.csv", &recovery_rows)?;
    out.json("decode.json", &summary)?;
    out.finish()?;
    Ok(())
}
