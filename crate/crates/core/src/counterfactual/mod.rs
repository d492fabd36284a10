//! Counterfactual validation of decoded critical features: preference bins,
//! exact feature-set edits, reconstruction, discriminability, faithfulness,
//! and voxel profiles.

mod edit;
mod profile;
mod protocol;

pub use edit::{apply_edit, edit_spec, EditKind, EditOp};
pub use profile::{build_profile, profile_edit_eval, ProfileConfig, ProfileFeature, ProfileSpec};
pub use protocol::{
    discriminability_eval, edit_record, faithfulness, reconstruction_eval, regenerate, separation,
    DiscriminabilityRecord, FaithfulnessRecord, FaithfulnessTrial, PreferenceGroup,
    ReconstructionRecord,
};

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::encoder::TokenModel;
use crate::error::{Error, Result};
use crate::world::{render_stimulus, FeatureDictionary, StimulusSpec, WorldConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Condition {
    Critical,
    Random,
    LowestIg,
    Profile,
}

impl Condition {
    pub fn label(self) -> &'static str {
        match self {
            Condition::Critical => "critical",
            Condition::Random => "random",
            Condition::LowestIg => "lowest-IG",
            Condition::Profile => "profile",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditRecord {
    pub voxel_id: u32,
    pub op: EditOp,
    /// The other image of the trial: the non-preferred partner of a Remove,
    /// the preferred source of an Add.
    pub reference_image: Option<u32>,
    pub before: f64,
    pub after: f64,
    /// Rep-averaged recorded response of the edited image.
    pub recorded: Option<f64>,
    pub condition: Condition,
    /// Requested features that the target already carried.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped_features: Vec<usize>,
}

impl EditRecord {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceSplit {
    pub voxel_id: u32,
    pub preferred: Vec<u32>,
    pub non_preferred: Vec<u32>,
    pub q_hi: f64,
    pub q_lo: f64,
    pub threshold_hi: f64,
    pub threshold_lo: f64,
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Images at or above the `q_hi` quantile of the voxel's rep-averaged
/// responses are preferred; those at or below the `q_lo` quantile are not.
/// An image sitting on both thresholds counts as non-preferred.
pub fn select_preference(voxel_id: u32, responses: &[(u32, f64)], q_hi: f64, q_lo: f64) -> Result<PreferenceSplit> {
    if !(0.0..=1.0).contains(&q_lo) || !(0.0..=1.0).contains(&q_hi) || q_hi <= q_lo {
        return Err(Error::Config(format!(
            "preference quantiles need 0 ≤ q_lo < q_hi ≤ 1, got q_lo={q_lo}, q_hi={q_hi}"
        )));
    }
    if let Some((id, _)) = responses.iter().find(|(_, r)| !r.is_finite()) {
        return Err(Error::NonFinite(format!("response of image {id}")));
    }
    if responses.is_empty() {
        return Err(Error::Empty(format!("voxel {voxel_id} has no responses")));
    }
    let mut sorted: Vec<f64> = responses.iter().map(|r| r.1).collect();
    sorted.sort_by(f64::total_cmp);
    let threshold_hi = quantile_sorted(&sorted, q_hi);
    let threshold_lo = quantile_sorted(&sorted, q_lo);
    let mut preferred = Vec::new();
    let mut non_preferred = Vec::new();
    for &(id, r) in responses {
        if r <= threshold_lo {
            non_preferred.push(id);
        } else if r >= threshold_hi {
            preferred.push(id);
        }
    }
    if preferred.is_empty() || non_preferred.is_empty() {
        return Err(Error::InsufficientData(format!(
            "voxel {voxel_id}: {} preferred and {} non-preferred images",
            preferred.len(),
            non_preferred.len()
        )));
    }
    preferred.sort_unstable();
    non_preferred.sort_unstable();
    Ok(PreferenceSplit {
        voxel_id,
        preferred,
        non_preferred,
        q_hi,
        q_lo,
        threshold_hi,
        threshold_lo,
    })
}

/// A read-only model together with what it takes to render new stimuli.
pub struct EditContext<'a, M: TokenModel + ?Sized> {
    pub model: &'a M,
    pub dictionary: &'a FeatureDictionary,
    pub world: &'a WorldConfig,
}

impl<M: TokenModel + ?Sized> Clone for EditContext<'_, M> {
    fn clone(&self) -> Self {
        *self
    }
}

impl<M: TokenModel + ?Sized> Copy for EditContext<'_, M> {}

impl<'a, M: TokenModel + ?Sized> EditContext<'a, M> {
    pub fn new(model: &'a M, dictionary: &'a FeatureDictionary, world: &'a WorldConfig) -> Self {
        Self {
            model,
            dictionary,
            world,
        }
    }

    pub fn predict_tokens(&self, tokens: ArrayView2<f64>, voxel: usize) -> Result<f64> {
        let p = self.model.predict(tokens, &[voxel])?[0];
        if !p.is_finite() {
            return Err(Error::NonFinite(format!("prediction for voxel {voxel}")));
        }
        Ok(p)
    }

    /// Renders the stimulus with `render_seed` and predicts one voxel.
    pub fn predict_stimulus(&self, spec: &StimulusSpec, voxel: usize, render_seed: u64) -> Result<f64> {
        let t = render_stimulus(spec, self.dictionary, self.world.token_noise_sd, render_seed)?;
        self.predict_tokens(t.values.view(), voxel)
    }
}
