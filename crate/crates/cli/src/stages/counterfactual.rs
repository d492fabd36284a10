use std::collections::{BTreeMap, BTreeSet};

use mine_core::attribution::Selection;
use mine_core::counterfactual::{
    build_profile, discriminability_eval, edit_record, faithfulness, profile_edit_eval, reconstruction_eval,
    separation, Condition, DiscriminabilityRecord, EditContext, EditKind, EditOp, EditRecord, FaithfulnessRecord,
    FaithfulnessTrial, ProfileSpec, ReconstructionRecord,
};
use mine_core::dataset::Dataset;
use mine_core::seed::{derive_seed, rng_for, DISCRIMINATE, EDIT, PAIR, PROFILE, RECONSTRUCT};
use mine_core::world::StimulusSpec;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{dataset, jsonl_file, mean, model, stage_err, world, Attributions, Decodes};
use crate::error::Result;
use crate::workspace::{Stage, Workspace};

/// Rep-averaged recorded response of `image` for voxel `voxel`.
fn recorded(ds: &Dataset, voxel: u32, image: u32, stage: Stage) -> Result<f64> {
    let col = ds
        .voxel_ids()
        .iter()
        .position(|&id| id == voxel)
        .ok_or_else(|| stage_err(stage, format!("voxel {voxel} is not in the dataset")))?;
    Ok(ds.target(ds.row(image)?, col))
}

fn decoded<'a>(dec: &'a Decodes, v: u32, image: u32, source: Selection, stage: Stage) -> Result<&'a [usize]> {
    dec.get(v, image, source).ok_or_else(|| {
        stage_err(
            stage,
            format!("no {} decode for voxel {v} on image {image}", source.label()),
        )
    })
}

#[derive(Serialize)]
struct ReconstructSummary {
    n_records: usize,
    n_voxels: usize,
    mean_error: BTreeMap<&'static str, f64>,
}

pub(super) fn reconstruct(ws: &Workspace) -> Result<()> {
    let c = &ws.config.counterfactual;
    let world = world(ws, Stage::Reconstruct)?;
    let ds = dataset(ws)?;
    let params = model(ws)?;
    let dec = Decodes::load(ws)?;
    let ctx = EditContext::new(&params, &world.dictionary, &world.config);
    let per_voxel: Vec<Vec<ReconstructionRecord>> = dec
        .splits
        .par_iter()
        .map(|split| {
            let v = split.voxel_id;
            let n = if c.reconstruct_images == 0 { split.preferred.len() } else { c.reconstruct_images };
            let mut out = Vec::new();
            for &image in split.preferred.iter().take(n) {
                let sources = Selection::ALL
                    .iter()
                    .map(|&s| Ok((s, decoded(&dec, v, image, s, Stage::Reconstruct)?.to_vec())))
                    .collect::<Result<Vec<_>>>()?;
                out.extend(reconstruction_eval(
                    ctx,
                    v as usize,
                    image,
                    recorded(&ds, v, image, Stage::Reconstruct)?,
                    &sources,
                    c.n_samples,
                    c.filler_range,
                    derive_seed(ws.seed(), &[RECONSTRUCT, v as u64, image as u64]),
                )?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<ReconstructionRecord> = per_voxel.into_iter().flatten().collect();
    let mean_error = Selection::ALL
        .iter()
        .map(|&s| {
            let m = mean(records.iter().filter(|r| r.source == s).map(|r| r.error)).unwrap_or(f64::NAN);
            (s.label(), m)
        })
        .collect::<BTreeMap<_, _>>();
    eprintln!("reconstruct: mean |error| {mean_error:?}");
    let mut out = ws.begin(Stage::Reconstruct)?;
    out.jsonl("reconstructions.jsonl", &records)?;
    out.json(
        "reconstruct.json",
        &ReconstructSummary {
            n_records: records.len(),
            n_voxels: dec.splits.len(),
            mean_error,
        },
    )?;
    out.finish()?;
    Ok(())
}

#[derive(Serialize)]
struct DiscriminateSummary {
    n_records: usize,
    n_voxels: usize,
    /// Mean over voxels of preferred-derived minus non-preferred-derived
    /// mean activation.
    mean_separation: Option<f64>,
    /// Mean planted gain of the same voxels.
    mean_gain: Option<f64>,
}

pub(super) fn discriminate(ws: &Workspace) -> Result<()> {
    let c = &ws.config.counterfactual;
    let world = world(ws, Stage::Discriminate)?;
    let params = model(ws)?;
    let dec = Decodes::load(ws)?;
    let ctx = EditContext::new(&params, &world.dictionary, &world.config);
    let per_voxel: Vec<Vec<DiscriminabilityRecord>> = dec
        .splits
        .par_iter()
        .map(|split| {
            let v = split.voxel_id;
            let sets = split
                .preferred
                .iter()
                .chain(&split.non_preferred)
                .map(|&i| Ok((i, decoded(&dec, v, i, Selection::TopIg, Stage::Discriminate)?.to_vec())))
                .collect::<Result<BTreeMap<_, _>>>()?;
            Ok(discriminability_eval(
                ctx,
                split,
                &sets,
                c.n_samples,
                c.filler_range,
                derive_seed(ws.seed(), &[DISCRIMINATE, v as u64]),
            )?)
        })
        .collect::<Result<_>>()?;
    let summary = DiscriminateSummary {
        n_records: per_voxel.iter().map(Vec::len).sum(),
        n_voxels: per_voxel.len(),
        mean_separation: mean(per_voxel.iter().filter_map(|r| separation(r))),
        mean_gain: mean(dec.splits.iter().map(|s| world.voxels[s.voxel_id as usize].gain)),
    };
    eprintln!(
        "discriminate: mean separation {:?}, mean gain {:?}",
        summary.mean_separation, summary.mean_gain
    );
    let records: Vec<DiscriminabilityRecord> = per_voxel.into_iter().flatten().collect();
    let mut out = ws.begin(Stage::Discriminate)?;
    out.jsonl("discriminability.jsonl", &records)?;
    out.json("discriminate.json", &summary)?;
    out.finish()?;
    Ok(())
}

#[derive(Default)]
struct VoxelEdits {
    edits: Vec<EditRecord>,
    faithfulness: Vec<FaithfulnessRecord>,
    skips: BTreeMap<&'static str, usize>,
}

#[derive(Serialize)]
struct EditSummary {
    guard: f64,
    n_edits: BTreeMap<&'static str, usize>,
    n_faithfulness: BTreeMap<&'static str, usize>,
    /// Trials not run, by reason.
    skipped: BTreeMap<&'static str, usize>,
    median_faithfulness: BTreeMap<&'static str, f64>,
}

pub(super) fn edit(ws: &Workspace) -> Result<()> {
    let guard = ws.config.guard();
    let world = world(ws, Stage::Edit)?;
    let ds = dataset(ws)?;
    let params = model(ws)?;
    let attr = Attributions::load(ws)?;
    let dec = Decodes::load(ws)?;
    let ctx = EditContext::new(&params, &world.dictionary, &world.config);
    let seed = ws.seed();
    let st = Stage::Edit;
    let per_voxel: Vec<VoxelEdits> = dec
        .splits
        .par_iter()
        .map(|split| {
            let v = split.voxel_id;
            let mut acc = VoxelEdits::default();
            for &xi in &split.preferred {
                let x: &StimulusSpec = &world.stimuli[xi as usize];
                let mut rng = rng_for(seed, &[PAIR, v as u64, xi as u64]);
                let ri = split.non_preferred[rng.random_range(0..split.non_preferred.len())];
                let x_ref: &StimulusSpec = &world.stimuli[ri as usize];
                let h_x = attr.prediction(v, xi, st)?;
                let h_ref = attr.prediction(v, ri, st)?;
                let d = decoded(&dec, v, xi, Selection::TopIg, st)?;

                let remove: Vec<usize> = d.iter().copied().filter(|&f| x.contains(f)).collect();
                if remove.is_empty() {
                    *acc.skips.entry("remove: no decoded feature in the image").or_default() += 1;
                } else {
                    let op = EditOp::new(EditKind::Remove, &remove, xi, derive_seed(seed, &[EDIT, v as u64, xi as u64, 0]));
                    match edit_record(ctx, v as usize, x, h_x, op, Some(ri), Condition::Critical, Some(recorded(&ds, v, xi, st)?)) {
                        Ok(r) => acc.edits.push(r),
                        Err(mine_core::Error::InvalidEdit(_)) => {
                            *acc.skips.entry("remove: would leave the image empty").or_default() += 1
                        }
                        Err(e) => return Err(e.into()),
                    }
                }

                let add_seed = derive_seed(seed, &[EDIT, v as u64, xi as u64, 1]);
                let add: Vec<usize> = remove.iter().copied().filter(|&f| !x_ref.contains(f)).collect();
                if add.is_empty() {
                    *acc.skips.entry("add: nothing new for the reference image").or_default() += 1;
                } else {
                    let op = EditOp::new(EditKind::Add, &add, ri, add_seed);
                    acc.edits.push(edit_record(
                        ctx,
                        v as usize,
                        x_ref,
                        h_ref,
                        op,
                        Some(xi),
                        Condition::Critical,
                        Some(recorded(&ds, v, ri, st)?),
                    )?);
                }

                for (condition, source) in [(Condition::Critical, Selection::TopIg), (Condition::Random, Selection::Random)] {
                    let trial = FaithfulnessTrial {
                        voxel: v as usize,
                        x,
                        x_ref,
                        h_x,
                        h_ref,
                        decoded: decoded(&dec, v, xi, source, st)?.to_vec(),
                        condition,
                    };
                    match faithfulness(ctx, &trial, guard, add_seed) {
                        Ok(r) => acc.faithfulness.push(r),
                        Err(mine_core::Error::GuardedDenominator { .. }) => {
                            *acc.skips
                                .entry(match condition {
                                    Condition::Critical => "faithfulness (critical): denominator below guard",
                                    _ => "faithfulness (random): denominator below guard",
                                })
                                .or_default() += 1
                        }
                        Err(e) => return Err(e.into()),
                    }
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut edits = Vec::new();
    let mut faith = Vec::new();
    let mut skipped: BTreeMap<&'static str, usize> = BTreeMap::new();
    for p in per_voxel {
        edits.extend(p.edits);
        faith.extend(p.faithfulness);
        for (k, n) in p.skips {
            *skipped.entry(k).or_default() += n;
        }
    }
    let mut n_edits = BTreeMap::new();
    for kind in [EditKind::Add, EditKind::Remove] {
        n_edits.insert(kind_label(kind), edits.iter().filter(|e| e.op.kind == kind).count());
    }
    let mut n_faithfulness = BTreeMap::new();
    let mut median_faithfulness = BTreeMap::new();
    for c in [Condition::Critical, Condition::Random] {
        let mut v: Vec<f64> = faith.iter().filter(|r| r.condition == c).map(|r| r.value).collect();
        n_faithfulness.insert(c.label(), v.len());
        if !v.is_empty() {
            v.sort_by(f64::total_cmp);
            median_faithfulness.insert(c.label(), mine_core::counterfactual::quantile_sorted(&v, 0.5));
        }
    }
    eprintln!("edit: {n_edits:?}, median faithfulness {median_faithfulness:?}, skipped {skipped:?}");
    let mut out = ws.begin(Stage::Edit)?;
    out.jsonl("edits.jsonl", &edits)?;
    out.jsonl("faithfulness.jsonl", &faith)?;
    out.json(
        "edit.json",
        &EditSummary {
            guard,
            n_edits,
            n_faithfulness,
            skipped,
            median_faithfulness,
        },
    )?;
    out.finish()?;
    Ok(())
}

pub(super) fn kind_label(kind: EditKind) -> &'static str {
    match kind {
        EditKind::Add => "add",
        EditKind::Remove => "remove",
    }
}

#[derive(Serialize)]
struct ProfileSummary {
    n_profiles: usize,
    /// Voxels whose trials did not yield a profile.
    without_profile: Vec<u32>,
    n_profile_edits: usize,
    mean_delta_profile: Option<f64>,
    mean_delta_per_image: Option<f64>,
}

pub(super) fn profile(ws: &Workspace) -> Result<()> {
    let world = world(ws, Stage::Profile)?;
    let params = model(ws)?;
    let ctx = EditContext::new(&params, &world.dictionary, &world.config);
    let faith: Vec<FaithfulnessRecord> = jsonl_file(&ws.path(Stage::Edit, "faithfulness.jsonl"))?;
    let edits: Vec<EditRecord> = jsonl_file(&ws.path(Stage::Edit, "edits.jsonl"))?;
    let mut by_voxel: BTreeMap<u32, Vec<FaithfulnessRecord>> = BTreeMap::new();
    for r in faith {
        by_voxel.entry(r.voxel_id).or_default().push(r);
    }
    let adds = per_image_adds(&edits);
    let jobs: Vec<(u32, Vec<FaithfulnessRecord>)> = by_voxel.into_iter().collect();
    let results: Vec<(u32, Option<(ProfileSpec, Vec<EditRecord>)>)> = jobs
        .par_iter()
        .map(|(v, recs)| {
            let Some(spec) = build_profile(*v, recs, &ws.config.profile, world.config.critical_cap)? else {
                return Ok((*v, None));
            };
            let mut seen = BTreeSet::new();
            let targets: Vec<(&StimulusSpec, f64, Option<f64>)> = adds
                .iter()
                .filter(|e| e.voxel_id == *v && seen.insert(e.op.target))
                .map(|e| (&world.stimuli[e.op.target as usize], e.before, e.recorded))
                .collect();
            let records = profile_edit_eval(
                ctx,
                *v as usize,
                &spec.canonical(),
                &targets,
                derive_seed(ws.seed(), &[PROFILE, *v as u64]),
            )?;
            Ok((*v, Some((spec, records))))
        })
        .collect::<Result<_>>()?;
    let mut profiles = Vec::new();
    let mut records = Vec::new();
    let mut without = Vec::new();
    for (v, r) in results {
        match r {
            Some((p, e)) => {
                profiles.push(p);
                records.extend(e);
            }
            None => without.push(v),
        }
    }
    let profiled: BTreeSet<u32> = profiles.iter().map(|p| p.voxel_id).collect();
    let summary = ProfileSummary {
        n_profiles: profiles.len(),
        without_profile: without,
        n_profile_edits: records.len(),
        mean_delta_profile: mean(records.iter().map(EditRecord::delta)),
        mean_delta_per_image: mean(
            adds.iter()
                .filter(|e| profiled.contains(&e.voxel_id))
                .map(|e| e.delta()),
        ),
    };
    eprintln!(
        "profile: {} profiles, mean Δ profile {:?} vs per-image {:?}",
        summary.n_profiles, summary.mean_delta_profile, summary.mean_delta_per_image
    );
    let mut out = ws.begin(Stage::Profile)?;
    out.jsonl("profiles.jsonl", &profiles)?;
    out.jsonl("profile_edits.jsonl", &records)?;
    out.json("profile.json", &summary)?;
    out.finish()?;
    Ok(())
}

/// Critical-feature Add edits, the per-image counterpart of a profile edit.
pub(super) fn per_image_adds(edits: &[EditRecord]) -> Vec<&EditRecord> {
    edits
        .iter()
        .filter(|e| e.op.kind == EditKind::Add && e.condition == Condition::Critical)
        .collect()
}
