use std::collections::HashMap;

use mine_core::attribution::{
    ig_entries, integrated_gradients, patch_eval, reduce_entries, AttributionRecord, BaselineToken, PatchCurve,
    PatchMode, ScoreReduction, Selection,
};
use mine_core::encoder::TokenModel;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dataset, model, stage_err, Attributions};
use crate::error::Result;
use crate::workspace::{Stage, Workspace};

#[derive(Serialize)]
struct AttributeSummary {
    n_images: usize,
    n_voxels: usize,
    n_records: usize,
    steps: usize,
    reduction: ScoreReduction,
    /// Completeness gap relative to `|ĥ(x) − ĥ(baseline)|`.
    median_relative_gap: Option<f64>,
    max_abs_gap: f64,
}

pub(super) fn attribute(ws: &Workspace) -> Result<()> {
    let cfg = &ws.config.attribution;
    let ds = dataset(ws)?;
    let params = model(ws)?;
    let baseline = BaselineToken {
        vector: ds.mean_token(&ds.split_rows("train")?)?,
        provenance: "mean token over every position of the train split".into(),
    };
    let rows = ds.split_rows("analysis")?;
    if rows.is_empty() {
        return Err(stage_err(Stage::Attribute, "the analysis split is empty"));
    }
    let voxels: Vec<usize> = (0..ds.n_voxels()).collect();
    let per_image: Vec<Vec<AttributionRecord>> = rows
        .par_iter()
        .map(|&r| {
            let id = ds.image_ids()[r];
            let tokens = ds.tokens(r);
            let mut recs = match cfg.reduction {
                ScoreReduction::Signed => integrated_gradients(&params, id, tokens, &voxels, &baseline, cfg.steps)?,
                ScoreReduction::Absolute => {
                    let base = baseline.sequence(tokens.nrows());
                    let fx = params.predict(tokens, &voxels)?;
                    let fb = params.predict(base.view(), &voxels)?;
                    voxels
                        .iter()
                        .map(|&v| {
                            let e = ig_entries(&params, tokens, &baseline, v, cfg.steps)?;
                            Ok(AttributionRecord {
                                voxel_id: v as u32,
                                image_id: id,
                                scores: reduce_entries(&e, ScoreReduction::Absolute).to_vec(),
                                completeness_gap: (e.sum() - (fx[v] - fb[v])).abs(),
                                prediction: fx[v],
                                baseline_prediction: fb[v],
                                n_steps: cfg.steps,
                            })
                        })
                        .collect::<mine_core::Result<Vec<_>>>()?
                }
            };
            for rec in &mut recs {
                rec.voxel_id = ds.voxel_ids()[rec.voxel_id as usize];
            }
            Ok(recs)
        })
        .collect::<Result<_>>()?;
    let records: Vec<AttributionRecord> = per_image.into_iter().flatten().collect();
    let mut rel: Vec<f64> = records
        .iter()
        .filter(|r| (r.prediction - r.baseline_prediction).abs() > 0.0)
        .map(|r| r.completeness_gap / (r.prediction - r.baseline_prediction).abs())
        .collect();
    rel.sort_by(f64::total_cmp);
    let summary = AttributeSummary {
        n_images: rows.len(),
        n_voxels: voxels.len(),
        n_records: records.len(),
        steps: cfg.steps,
        reduction: cfg.reduction,
        median_relative_gap: (!rel.is_empty()).then(|| rel[rel.len() / 2]),
        max_abs_gap: records.iter().map(|r| r.completeness_gap).fold(0.0, f64::max),
    };
    let mut out = ws.begin(Stage::Attribute)?;
    out.json("baseline.json", &baseline)?;
    out.jsonl("attributions.jsonl", &records)?;
    out.json("attribute.json", &summary)?;
    out.finish()?;
    Ok(())
}

/// One point of one curve, flattened for CSV.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveRow {
    pub mode: PatchMode,
    pub selection: Selection,
    pub k: usize,
    pub ratio: f64,
    pub r2_patched: f64,
    pub r2_full: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VoxelRatioRow {
    pub mode: PatchMode,
    pub selection: Selection,
    pub k: usize,
    pub voxel_id: u32,
    pub ratio: Option<f64>,
}

#[derive(Serialize)]
struct CurvesFile {
    curves: Vec<PatchCurve>,
}

pub(super) fn patch_curve(ws: &Workspace) -> Result<()> {
    let ds = dataset(ws)?;
    let params = model(ws)?;
    let baseline: BaselineToken = super::json_file(&ws.path(Stage::Attribute, "baseline.json"))?;
    let attr = Attributions::load(ws)?;
    let rows = ds.split_rows("analysis")?;
    let n_vox = ds.n_voxels();
    let s_len = ds.seq_len();
    let mut scores = Vec::with_capacity(rows.len());
    let mut full = Array2::zeros((rows.len(), n_vox));
    for (i, &r) in rows.iter().enumerate() {
        let image = ds.image_ids()[r];
        let mut m = Array2::zeros((n_vox, s_len));
        for v in 0..n_vox {
            let rec = attr
                .get(ds.voxel_ids()[v], image)
                .ok_or_else(|| stage_err(Stage::PatchCurve, format!("no attribution for image {image}")))?;
            m.row_mut(v).assign(&ndarray::ArrayView1::from(&rec.scores));
            full[(i, v)] = rec.prediction;
        }
        scores.push(m);
    }
    let mut curves = Vec::new();
    let mut curve_rows = Vec::new();
    let mut voxel_rows = Vec::new();
    for mode in [PatchMode::Necessity, PatchMode::Sufficiency] {
        for selection in [Selection::TopIg, Selection::Random] {
            let mut points = Vec::new();
            for &k in &ws.config.attribution.patch_ks {
                let p = patch_eval(&params, &ds, &rows, &scores, &full, k, mode, selection, &baseline, ws.seed())?;
                curve_rows.push(CurveRow {
                    mode,
                    selection,
                    k,
                    ratio: p.ratio,
                    r2_patched: p.r2_patched,
                    r2_full: p.r2_full,
                });
                for (v, r) in p.per_voxel.iter().enumerate() {
                    voxel_rows.push(VoxelRatioRow {
                        mode,
                        selection,
                        k,
                        voxel_id: ds.voxel_ids()[v],
                        ratio: *r,
                    });
                }
                points.push(p);
            }
            eprintln!(
                "patch-curve: {mode:?} {} {:?}",
                selection.label(),
                points.iter().map(|p| (p.k, (p.ratio * 1e3).round() / 1e3)).collect::<Vec<_>>()
            );
            curves.push(PatchCurve { mode, selection, points });
        }
    }
    let mut out = ws.begin(Stage::PatchCurve)?;
    out.json("patch_curves.json", &CurvesFile { curves })?;
    out.csv("patch_curves.csv", &curve_rows)?;
    out.csv("patch_voxels.csv", &voxel_rows)?;
    out.finish()?;
    Ok(())
}

/// Per-voxel ratios from `patch_voxels.csv`, keyed by `(mode, selection, k)`.
pub(super) fn voxel_ratios(ws: &Workspace) -> Result<HashMap<(PatchMode, Selection, usize), Vec<(u32, f64)>>> {
    let mut rdr = csv::Reader::from_path(ws.path(Stage::PatchCurve, "patch_voxels.csv"))?;
    let mut out: HashMap<_, Vec<(u32, f64)>> = HashMap::new();
    for row in rdr.deserialize() {
        let row: VoxelRatioRow = row?;
        if let Some(r) = row.ratio {
            out.entry((row.mode, row.selection, row.k)).or_default().push((row.voxel_id, r));
        }
    }
    Ok(out)
}

pub(super) fn curve_rows(ws: &Workspace) -> Result<Vec<CurveRow>> {
    let mut rdr = csv::Reader::from_path(ws.path(Stage::PatchCurve, "patch_curves.csv"))?;
    Ok(rdr.deserialize().collect::<std::result::Result<_, _>>()?)
}
