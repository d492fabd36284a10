use std::collections::{BTreeMap, BTreeSet};

use mine_core::attribution::{PatchMode, Selection};
use mine_core::counterfactual::{DiscriminabilityRecord, EditRecord, FaithfulnessRecord, ReconstructionRecord};
use mine_stats::FitOptions;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::Value;

use super::attribute::{curve_rows, voxel_ratios, CurveRow};
use super::counterfactual::{kind_label, per_image_adds};
use super::{eval_summary, jsonl_file, mean, world};
use crate::analysis::{self, TestOutcome};
use crate::error::Result;
use crate::workspace::{read_json_value, Stage, Workspace};

#[derive(Serialize)]
struct NecessityPoint {
    k: usize,
    top_ig_ratio: f64,
    random_ratio: f64,
    top_ig_below_random: bool,
}

#[derive(Serialize)]
struct StatsFile {
    necessity_curve: Vec<NecessityPoint>,
    /// Mean planted gain of the discriminability voxels.
    mean_gain: Option<f64>,
    tests: Vec<TestOutcome>,
}

type Job<'a> = Box<dyn Fn() -> TestOutcome + Send + Sync + 'a>;

pub(super) fn stats(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config;
    let opts = FitOptions {
        max_iter: cfg.stats.max_iter,
        restarts: cfg.stats.restarts,
        ..Default::default()
    };
    let world = world(ws, Stage::Stats)?;
    let included: BTreeSet<u32> = eval_summary(ws)?.included_voxels.into_iter().collect();
    let ratios = voxel_ratios(ws)?;
    let curves = curve_rows(ws)?;
    let recon: Vec<ReconstructionRecord> = jsonl_file(&ws.path(Stage::Reconstruct, "reconstructions.jsonl"))?;
    let disc: Vec<DiscriminabilityRecord> = jsonl_file(&ws.path(Stage::Discriminate, "discriminability.jsonl"))?;
    let edits: Vec<EditRecord> = jsonl_file(&ws.path(Stage::Edit, "edits.jsonl"))?;
    let faith: Vec<FaithfulnessRecord> = jsonl_file(&ws.path(Stage::Edit, "faithfulness.jsonl"))?;
    let profile: Vec<EditRecord> = jsonl_file(&ws.path(Stage::Profile, "profile_edits.jsonl"))?;

    let disc_voxels: BTreeSet<u32> = disc.iter().map(|r| r.voxel_id).collect();
    let mean_gain = mean(disc_voxels.iter().map(|&v| world.voxels[v as usize].gain));
    let per_image = per_image_adds(&edits);

    let necessity_curve = cfg
        .stats
        .necessity_ks
        .iter()
        .filter_map(|&k| {
            let at = |s: Selection| {
                curves
                    .iter()
                    .find(|c| c.mode == PatchMode::Necessity && c.selection == s && c.k == k)
                    .map(|c| c.ratio)
            };
            let (t, r) = (at(Selection::TopIg)?, at(Selection::Random)?);
            Some(NecessityPoint {
                k,
                top_ig_ratio: t,
                random_ratio: r,
                top_ig_below_random: t < r,
            })
        })
        .collect();

    let pick = |s: Selection, k: usize| -> Vec<(u32, f64)> {
        ratios
            .get(&(PatchMode::Necessity, s, k))
            .map(|v| v.iter().copied().filter(|(id, _)| included.contains(id)).collect())
            .unwrap_or_default()
    };
    let mut jobs: Vec<Job> = Vec::new();
    for &k in &cfg.stats.necessity_ks {
        let (top, rnd) = (pick(Selection::TopIg, k), pick(Selection::Random, k));
        jobs.push(Box::new(move || analysis::necessity_test(k, &top, &rnd, &opts)));
    }
    jobs.push(Box::new(|| analysis::reconstruction_test(&recon, &opts)));
    let min_sep = 0.5 * mean_gain.unwrap_or(0.0);
    jobs.push(Box::new(move || analysis::discriminability_test(&disc, min_sep, &opts)));
    jobs.push(Box::new(|| analysis::edit_direction_test(&edits, &opts)));
    jobs.push(Box::new(|| analysis::faithfulness_test(&faith, &opts)));
    jobs.push(Box::new(|| analysis::profile_test(&profile, &per_image, &opts)));
    let tests: Vec<TestOutcome> = jobs.par_iter().map(|j| j()).collect();
    for t in &tests {
        let h: Vec<String> = t
            .hypotheses
            .iter()
            .map(|h| {
                let w = t.wald(&h.coefficient);
                format!(
                    "{} = {:.4} (p = {:.2e}{})",
                    h.coefficient,
                    w.map_or(f64::NAN, |w| w.estimate),
                    w.map_or(f64::NAN, |w| w.p_value),
                    w.map_or("", |w| w.stars.as_str())
                )
            })
            .collect();
        eprintln!(
            "stats: {} n={} {} {}",
            t.name,
            t.n_obs,
            h.join(", "),
            t.error.as_deref().unwrap_or(if t.passed { "PASS" } else { "FAIL" })
        );
    }
    let mut out = ws.begin(Stage::Stats)?;
    out.json(
        "stats.json",
        &StatsFile {
            necessity_curve,
            mean_gain,
            tests,
        },
    )?;
    out.finish()?;
    Ok(())
}

/// A stage summary without its annotation keys.
fn summary(ws: &Workspace, stage: Stage, file: &str) -> Result<Value> {
    let mut v = read_json_value(&ws.path(stage, file))?;
    if let Some(o) = v.as_object_mut() {
        o.remove("config_hash");
        o.remove("seed");
    }
    Ok(v)
}

fn label<T: Serialize>(x: &T) -> String {
    match serde_json::to_value(x) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

/// Record counts per condition of one JSON-lines file, plus the total.
fn count<T>(rows: &[T], key: impl Fn(&T) -> String) -> BTreeMap<String, usize> {
    let mut out: BTreeMap<String, usize> = BTreeMap::new();
    for r in rows {
        *out.entry(key(r)).or_default() += 1;
    }
    out.insert("total".into(), rows.len());
    out
}

#[derive(Serialize)]
struct ReconRow {
    voxel_id: u32,
    image_id: u32,
    source: String,
    sample: usize,
    predicted: f64,
    recorded: f64,
    error: f64,
}

#[derive(Serialize)]
struct ActivationRow {
    voxel_id: u32,
    image_id: u32,
    group: String,
    sample: usize,
    predicted: f64,
}

#[derive(Serialize)]
struct FaithRow {
    voxel_id: u32,
    preferred_image: u32,
    reference_image: u32,
    condition: String,
    value: f64,
    denominator: f64,
    empty_edit: bool,
}

#[derive(Serialize)]
struct EditRow {
    voxel_id: u32,
    edited_image: u32,
    reference_image: Option<u32>,
    kind: &'static str,
    condition: String,
    before: f64,
    after: f64,
    delta: f64,
}

#[derive(Serialize)]
struct ProfileRow {
    voxel_id: u32,
    image_id: u32,
    edit: &'static str,
    delta: f64,
}

pub(super) fn report(ws: &Workspace) -> Result<()> {
    let stats = read_json_value(&ws.path(Stage::Stats, "stats.json"))?;
    let recon: Vec<ReconstructionRecord> = jsonl_file(&ws.path(Stage::Reconstruct, "reconstructions.jsonl"))?;
    let disc: Vec<DiscriminabilityRecord> = jsonl_file(&ws.path(Stage::Discriminate, "discriminability.jsonl"))?;
    let edits: Vec<EditRecord> = jsonl_file(&ws.path(Stage::Edit, "edits.jsonl"))?;
    let faith: Vec<FaithfulnessRecord> = jsonl_file(&ws.path(Stage::Edit, "faithfulness.jsonl"))?;
    let profile: Vec<EditRecord> = jsonl_file(&ws.path(Stage::Profile, "profile_edits.jsonl"))?;
    let decodes: Vec<mine_core::lens::CriticalFeatureSet> =
        jsonl_file(&ws.path(Stage::Decode, "critical_features.jsonl"))?;
    let curves: Vec<CurveRow> = curve_rows(ws)?;
    let eval = eval_summary(ws)?;

    let mut counts = BTreeMap::new();
    counts.insert("decode/critical_features.jsonl", count(&decodes, |r| label(&r.source)));
    counts.insert("reconstruct/reconstructions.jsonl", count(&recon, |r| label(&r.source)));
    counts.insert("discriminate/discriminability.jsonl", count(&disc, |r| label(&r.group)));
    counts.insert("edit/edits.jsonl", count(&edits, |r| kind_label(r.op.kind).to_string()));
    counts.insert("edit/faithfulness.jsonl", count(&faith, |r| label(&r.condition)));
    counts.insert("profile/profile_edits.jsonl", count(&profile, |r| label(&r.condition)));

    let test_values = stats["tests"].as_array().cloned().unwrap_or_default();
    let report_tests: Vec<Value> = test_values
        .iter()
        .map(|t| {
            serde_json::json!({
                "name": t["name"],
                "passed": t["passed"],
                "n_obs": t["n_obs"],
                "hypotheses": t["hypotheses"],
                "wald": t["wald"],
                "error": t.get("error").cloned().unwrap_or(Value::Null),
            })
        })
        .collect();

    let doc = serde_json::json!({
        "eval": {
            "r2": eval.r2,
            "mean_test_accuracy": eval.mean_test_accuracy,
            "n_voxels": eval.n_voxels,
            "n_included": eval.included_voxels.len(),
        },
        "recovery": summary(ws, Stage::Decode, "decode.json")?["recovery"],
        "patch_curves": curves,
        "necessity_curve": stats["necessity_curve"],
        "reconstruction": summary(ws, Stage::Reconstruct, "reconstruct.json")?,
        "discriminability": summary(ws, Stage::Discriminate, "discriminate.json")?,
        "edits": summary(ws, Stage::Edit, "edit.json")?,
        "profile": summary(ws, Stage::Profile, "profile.json")?,
        "tests": report_tests,
        "all_tests_passed": test_values.iter().all(|t| t["passed"] == Value::Bool(true)),
        "counts": counts,
    });

    let mut out = ws.begin(Stage::Report)?;
    out.json("report.json", &doc)?;
    out.csv(
        "reconstruction_errors.csv",
        &recon
            .iter()
            .map(|r| ReconRow {
                voxel_id: r.voxel_id,
                image_id: r.image_id,
                source: label(&r.source),
                sample: r.sample,
                predicted: r.predicted,
                recorded: r.recorded,
                error: r.error,
            })
            .collect::<Vec<_>>(),
    )?;
    out.csv(
        "activations.csv",
        &disc
            .iter()
            .map(|r| ActivationRow {
                voxel_id: r.voxel_id,
                image_id: r.image_id,
                group: label(&r.group),
                sample: r.sample,
                predicted: r.predicted,
            })
            .collect::<Vec<_>>(),
    )?;
    out.csv(
        "faithfulness.csv",
        &faith
            .iter()
            .map(|r| FaithRow {
                voxel_id: r.voxel_id,
                preferred_image: r.preferred_image,
                reference_image: r.reference_image,
                condition: label(&r.condition),
                value: r.value,
                denominator: r.denominator,
                empty_edit: r.empty_edit,
            })
            .collect::<Vec<_>>(),
    )?;
    out.csv(
        "edit_deltas.csv",
        &edits
            .iter()
            .map(|r| EditRow {
                voxel_id: r.voxel_id,
                edited_image: r.op.target,
                reference_image: r.reference_image,
                kind: kind_label(r.op.kind),
                condition: label(&r.condition),
                before: r.before,
                after: r.after,
                delta: r.delta(),
            })
            .collect::<Vec<_>>(),
    )?;
    let profiled: BTreeSet<u32> = profile.iter().map(|r| r.voxel_id).collect();
    let profile_rows: Vec<ProfileRow> = profile
        .iter()
        .map(|r| ProfileRow {
            voxel_id: r.voxel_id,
            image_id: r.op.target,
            edit: "profile",
            delta: r.delta(),
        })
        .chain(
            per_image_adds(&edits)
                .into_iter()
                .filter(|r| profiled.contains(&r.voxel_id))
                .map(|r| ProfileRow {
                    voxel_id: r.voxel_id,
                    image_id: r.op.target,
                    edit: "per-image",
                    delta: r.delta(),
                }),
        )
        .collect();
    out.csv("profile_vs_image.csv", &profile_rows)?;
    out.csv("patch_curves.csv", &curves)?;
    out.finish()?;
    Ok(())
}
