//! The mixed-model comparisons behind every reported significance marker.
//! Each test fits a random-intercept LMM and reads Wald tests off it.

use std::collections::BTreeMap;

use mine_core::attribution::Selection;
use mine_core::counterfactual::{
    Condition, DiscriminabilityRecord, EditKind, EditRecord, FaithfulnessRecord, PreferenceGroup, ReconstructionRecord,
};
use mine_stats::{fit_lmm, wald_test, FitOptions, FixedDesign, GroupingFactor, MixedFit, MixedModelSpec, WaldTest};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Positive,
    Negative,
}

/// What a test must show: the coefficient has the stated sign, its p-value
/// is at most `alpha`, and (optionally) its magnitude reaches `min_effect`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hypothesis {
    pub coefficient: String,
    pub direction: Direction,
    pub alpha: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub min_effect: Option<f64>,
    pub holds: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct TestOutcome {
    pub name: String,
    pub description: String,
    pub n_obs: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fit: Option<MixedFit>,
    pub wald: Vec<WaldTest>,
    pub hypotheses: Vec<Hypothesis>,
    pub passed: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl TestOutcome {
    pub fn wald(&self, coefficient: &str) -> Option<&WaldTest> {
        self.wald.iter().find(|w| w.coefficient == coefficient)
    }
}

/// Fits `y ~ columns + (1|factor)...` and evaluates the hypotheses.
pub fn run_test(
    name: &str,
    description: &str,
    y: Vec<f64>,
    columns: Vec<(&str, Vec<f64>)>,
    factors: Vec<GroupingFactor>,
    mut hypotheses: Vec<Hypothesis>,
    opts: &FitOptions,
) -> TestOutcome {
    let n_obs = y.len();
    let fitted = FixedDesign::from_columns(columns).and_then(|x| {
        let fit = fit_lmm(&MixedModelSpec::new(y, x, factors), opts)?;
        let wald = fit
            .coefficient_names
            .iter()
            .map(|c| wald_test(&fit, c))
            .collect::<mine_stats::Result<Vec<_>>>()?;
        Ok((fit, wald))
    });
    match fitted {
        Ok((fit, wald)) => {
            for h in &mut hypotheses {
                h.holds = wald.iter().find(|w| w.coefficient == h.coefficient).is_some_and(|w| {
                    let signed = match h.direction {
                        Direction::Positive => w.estimate,
                        Direction::Negative => -w.estimate,
                    };
                    signed > 0.0 && w.p_value <= h.alpha && h.min_effect.is_none_or(|m| signed >= m)
                });
            }
            TestOutcome {
                name: name.into(),
                description: description.into(),
                n_obs,
                passed: hypotheses.iter().all(|h| h.holds),
                fit: Some(fit),
                wald,
                hypotheses,
                error: None,
            }
        }
        Err(e) => TestOutcome {
            name: name.into(),
            description: description.into(),
            n_obs,
            fit: None,
            wald: Vec::new(),
            hypotheses,
            passed: false,
            error: Some(e.to_string()),
        },
    }
}

fn hypothesis(coefficient: &str, direction: Direction, alpha: f64) -> Hypothesis {
    Hypothesis {
        coefficient: coefficient.into(),
        direction,
        alpha,
        min_effect: None,
        holds: false,
    }
}

fn indicator<T>(rows: &[T], f: impl Fn(&T) -> bool) -> Vec<f64> {
    rows.iter().map(|r| if f(r) { 1.0 } else { 0.0 }).collect()
}

/// Per-voxel `R²_k/R²` under top-IG versus random necessity patching,
/// paired within voxel.
pub fn necessity_test(k: usize, top: &[(u32, f64)], random: &[(u32, f64)], opts: &FitOptions) -> TestOutcome {
    let rnd: BTreeMap<u32, f64> = random.iter().copied().collect();
    let mut rows = Vec::new();
    for &(v, t) in top {
        if let Some(&r) = rnd.get(&v) {
            rows.push((v, true, t));
            rows.push((v, false, r));
        }
    }
    run_test(
        &format!("necessity_k{k}"),
        &format!("per-voxel R²_k/R² after removing {k} tokens: top-IG versus random"),
        rows.iter().map(|r| r.2).collect(),
        vec![("intercept", vec![1.0; rows.len()]), ("top_ig", indicator(&rows, |r| r.1))],
        vec![GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.0).collect::<Vec<_>>())],
        vec![hypothesis("top_ig", Direction::Negative, 0.01)],
        opts,
    )
}

/// Mean reconstruction error per (voxel, image, source), with top-IG as
/// the reference level.
pub fn reconstruction_test(records: &[ReconstructionRecord], opts: &FitOptions) -> TestOutcome {
    let mut cells: BTreeMap<(u32, u32, Selection), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = cells.entry((r.voxel_id, r.image_id, r.source)).or_default();
        e.0 += r.error;
        e.1 += 1;
    }
    let rows: Vec<((u32, u32, Selection), f64)> = cells.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    run_test(
        "reconstruction",
        "mean |predicted − recorded| of regenerated stimuli by decoding source",
        rows.iter().map(|r| r.1).collect(),
        vec![
            ("intercept", vec![1.0; rows.len()]),
            ("random", indicator(&rows, |r| r.0 .2 == Selection::Random)),
            ("lowest_ig", indicator(&rows, |r| r.0 .2 == Selection::LowestIg)),
        ],
        vec![
            GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.0 .0).collect::<Vec<_>>()),
            GroupingFactor::from_labels("image", &rows.iter().map(|r| r.0 .1).collect::<Vec<_>>()),
        ],
        vec![hypothesis("random", Direction::Positive, 0.001)],
        opts,
    )
}

/// Mean predicted activation per (voxel, image, group) of regenerated
/// stimuli; the preferred effect must reach `min_separation`.
pub fn discriminability_test(records: &[DiscriminabilityRecord], min_separation: f64, opts: &FitOptions) -> TestOutcome {
    let mut cells: BTreeMap<(u32, u32, PreferenceGroup), (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = cells.entry((r.voxel_id, r.image_id, r.group)).or_default();
        e.0 += r.predicted;
        e.1 += 1;
    }
    let rows: Vec<((u32, u32, PreferenceGroup), f64)> = cells.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect();
    let mut h = hypothesis("preferred", Direction::Positive, 0.001);
    h.min_effect = Some(min_separation);
    run_test(
        "discriminability",
        "predicted activation of stimuli regenerated from preferred versus non-preferred decodes",
        rows.iter().map(|r| r.1).collect(),
        vec![
            ("intercept", vec![1.0; rows.len()]),
            ("preferred", indicator(&rows, |r| r.0 .2 == PreferenceGroup::Preferred)),
        ],
        vec![
            GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.0 .0).collect::<Vec<_>>()),
            GroupingFactor::from_labels("image", &rows.iter().map(|r| r.0 .1).collect::<Vec<_>>()),
        ],
        vec![h],
        opts,
    )
}

/// Activation change of critical-feature edits, one cell mean per edit type.
pub fn edit_direction_test(records: &[EditRecord], opts: &FitOptions) -> TestOutcome {
    let rows: Vec<&EditRecord> = records.iter().filter(|r| r.condition == Condition::Critical).collect();
    let edited: Vec<u32> = rows.iter().map(|r| r.op.target).collect();
    let reference: Vec<u32> = rows.iter().map(|r| r.reference_image.unwrap_or(r.op.target)).collect();
    run_test(
        "edit_direction",
        "predicted activation change after adding or removing decoded critical features",
        rows.iter().map(|r| r.delta()).collect(),
        vec![
            ("add", indicator(&rows, |r| r.op.kind == EditKind::Add)),
            ("remove", indicator(&rows, |r| r.op.kind == EditKind::Remove)),
        ],
        vec![
            GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.voxel_id).collect::<Vec<_>>()),
            GroupingFactor::from_labels("edited_image", &edited),
            GroupingFactor::from_labels("reference_image", &reference),
        ],
        vec![
            hypothesis("add", Direction::Positive, 0.001),
            hypothesis("remove", Direction::Negative, 0.001),
        ],
        opts,
    )
}

/// Faithfulness of critical versus random-token features on matched trials.
pub fn faithfulness_test(records: &[FaithfulnessRecord], opts: &FitOptions) -> TestOutcome {
    let rows: Vec<&FaithfulnessRecord> = records
        .iter()
        .filter(|r| matches!(r.condition, Condition::Critical | Condition::Random))
        .collect();
    run_test(
        "faithfulness",
        "activation gap recovered by inserting decoded features into the non-preferred image",
        rows.iter().map(|r| r.value).collect(),
        vec![
            ("intercept", vec![1.0; rows.len()]),
            ("critical", indicator(&rows, |r| r.condition == Condition::Critical)),
        ],
        vec![
            GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.voxel_id).collect::<Vec<_>>()),
            GroupingFactor::from_labels("image", &rows.iter().map(|r| r.preferred_image).collect::<Vec<_>>()),
        ],
        vec![hypothesis("critical", Direction::Positive, 0.01)],
        opts,
    )
}

/// Profile Add versus per-image critical Add on the same reference images.
pub fn profile_test(profile: &[EditRecord], per_image: &[&EditRecord], opts: &FitOptions) -> TestOutcome {
    let voxels: std::collections::BTreeSet<u32> = profile.iter().map(|r| r.voxel_id).collect();
    let mut rows: Vec<(u32, u32, bool, f64)> = profile
        .iter()
        .map(|r| (r.voxel_id, r.op.target, true, r.delta()))
        .collect();
    rows.extend(
        per_image
            .iter()
            .filter(|r| voxels.contains(&r.voxel_id))
            .map(|r| (r.voxel_id, r.op.target, false, r.delta())),
    );
    run_test(
        "profile",
        "activation change from adding the voxel profile versus the per-image critical features",
        rows.iter().map(|r| r.3).collect(),
        vec![("intercept", vec![1.0; rows.len()]), ("profile", indicator(&rows, |r| r.2))],
        vec![
            GroupingFactor::from_labels("voxel", &rows.iter().map(|r| r.0).collect::<Vec<_>>()),
            GroupingFactor::from_labels("image", &rows.iter().map(|r| r.1).collect::<Vec<_>>()),
        ],
        vec![hypothesis("profile", Direction::Positive, 0.05)],
        opts,
    )
}
