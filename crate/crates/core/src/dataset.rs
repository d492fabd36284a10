//! In-memory training view: tokens per image, rep-averaged targets per
//! `(image, voxel)`, the raw repeats for noise ceilings, and the splits.

use std::collections::HashMap;

use ndarray::{Array2, Array3, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::io::{ResponseTable, SplitSpec, TokenTensor};
use crate::world::{noise_ceiling, World};

#[derive(Debug, Clone)]
pub struct Dataset {
    image_ids: Vec<u32>,
    row_of: HashMap<u32, usize>,
    tokens: Array3<f64>,
    voxel_ids: Vec<u32>,
    targets: Array2<f64>,
    responses: ResponseTable,
    splits: SplitSpec,
}

impl Dataset {
    /// Joins tokens and responses on image id. Voxel `i` of the encoder is
    /// the `i`-th smallest voxel id in the table.
    pub fn new(tokens: &TokenTensor, responses: ResponseTable, splits: SplitSpec) -> Result<Self> {
        Self::from_array(tokens.image_ids.clone(), tokens.to_f64(), responses, splits)
    }

    pub fn from_array(
        image_ids: Vec<u32>,
        tokens: Array3<f64>,
        responses: ResponseTable,
        splits: SplitSpec,
    ) -> Result<Self> {
        if image_ids.len() != tokens.shape()[0] {
            return Err(Error::Shape(format!(
                "{} image ids for {} token slabs",
                image_ids.len(),
                tokens.shape()[0]
            )));
        }
        if responses.is_empty() {
            return Err(Error::Empty("response table".into()));
        }
        let row_of: HashMap<u32, usize> =
            image_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        if row_of.len() != image_ids.len() {
            return Err(Error::Format("duplicate image ids in token tensor".into()));
        }
        splits.validate(&image_ids)?;
        let voxel_ids = responses.voxel_ids();
        let targets = responses.mean_matrix(&image_ids, &voxel_ids)?;
        Ok(Self {
            image_ids,
            row_of,
            tokens,
            voxel_ids,
            targets,
            responses,
            splits,
        })
    }

    pub fn from_world(world: &World, splits: SplitSpec) -> Result<Self> {
        let ids = (0..world.config.n_images as u32).collect();
        Self::from_array(ids, world.render_all()?, world.responses(), splits)
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_voxels(&self) -> usize {
        self.voxel_ids.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[2]
    }

    pub fn image_ids(&self) -> &[u32] {
        &self.image_ids
    }

    pub fn voxel_ids(&self) -> &[u32] {
        &self.voxel_ids
    }

    pub fn splits(&self) -> &SplitSpec {
        &self.splits
    }

    pub fn responses(&self) -> &ResponseTable {
        &self.responses
    }

    pub fn all_tokens(&self) -> &Array3<f64> {
        &self.tokens
    }

    pub fn row(&self, image_id: u32) -> Result<usize> {
        self.row_of
            .get(&image_id)
            .copied()
            .ok_or_else(|| Error::OutOfRange(format!("image {image_id} not in dataset")))
    }

    /// Row indices of a named split.
    pub fn split_rows(&self, name: &str) -> Result<Vec<usize>> {
        let ids = self
            .splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown split `{name}`")))?;
        ids.iter().map(|&id| self.row(id)).collect()
    }

    pub fn tokens(&self, row: usize) -> ArrayView2<'_, f64> {
        self.tokens.index_axis(Axis(0), row)
    }

    /// Rep-averaged response of every voxel to image `row`.
    pub fn target(&self, row: usize, voxel: usize) -> f64 {
        self.targets[(row, voxel)]
    }

    pub fn targets(&self) -> &Array2<f64> {
        &self.targets
    }

    /// Noise ceiling of every voxel from the repeats of the given rows.
    pub fn noise_ceilings(&self, rows: &[usize]) -> Result<Vec<f64>> {
        let grouped = self.responses.grouped();
        self.voxel_ids
            .iter()
            .map(|v| {
                let by_image = &grouped[v];
                let reps: Vec<Vec<f64>> = rows
                    .iter()
                    .map(|&r| {
                        by_image
                            .get(&self.image_ids[r])
                            .map(|reps| reps.iter().map(|(_, x)| *x).collect())
                            .unwrap_or_default()
                    })
                    .collect();
                noise_ceiling(&reps)
            })
            .collect()
    }

    /// Mean token over every position of the given rows.
    pub fn mean_token(&self, rows: &[usize]) -> Result<ndarray::Array1<f64>> {
        if rows.is_empty() {
            return Err(Error::Empty("no images for the mean token".into()));
        }
        let mut sum = ndarray::Array1::zeros(self.token_dim());
        for &r in rows {
            sum += &self.tokens(r).sum_axis(Axis(0));
        }
        Ok(sum / (rows.len() * self.seq_len()) as f64)
    }

    /// Copy with each voxel's targets permuted across images (the
    /// shuffled-label control). Repeats move with their image.
    pub fn shuffled_labels(&self, seed: u64) -> Self {
        use rand::seq::SliceRandom;
        let mut rng = crate::seed::rng_for(seed, &[crate::seed::SHUFFLE]);
        let mut out = self.clone();
        for v in 0..self.n_voxels() {
            let mut perm: Vec<usize> = (0..self.n_images()).collect();
            perm.shuffle(&mut rng);
            for (dst, &src) in perm.iter().enumerate() {
                out.targets[(dst, v)] = self.targets[(src, v)];
            }
        }
        out
    }
}
