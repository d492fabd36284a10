use ndarray::Array1;
use rand::seq::{index, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::evaluate_r2;
use super::optim::{adamw_step, onecycle_lr, AdamWConfig, OptimState, ScheduleConfig};
use crate::dataset::Dataset;
use crate::encoder::{backward_accumulate, forward, EncoderParams};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Zero means one pass over the training split per epoch.
    pub steps_per_epoch: usize,
    pub images_per_batch: usize,
    pub voxels_per_batch: usize,
    /// Validation R̄² is computed every this many epochs and after the last.
    pub eval_every: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            steps_per_epoch: 1000,
            images_per_batch: 64,
            voxels_per_batch: 256,
            eval_every: 1,
            seed: 0,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("epochs", self.epochs),
            ("images_per_batch", self.images_per_batch),
            ("voxels_per_batch", self.voxels_per_batch),
            ("eval_every", self.eval_every),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("train.{name} must be positive")));
            }
        }
        self.schedule.validate()
    }

    pub fn resolved_steps_per_epoch(&self, n_train: usize) -> usize {
        if self.steps_per_epoch > 0 {
            self.steps_per_epoch
        } else {
            n_train.div_ceil(self.images_per_batch).max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_r2: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the epoch with the best validation R̄².
    pub best: EncoderParams,
    pub best_epoch: usize,
    pub best_val_r2: f64,
    pub last: EncoderParams,
    pub log: Vec<LogEntry>,
}

/// Loss and summed gradients for one batch; images are processed in
/// parallel and reduced in batch order.
fn batch_gradient(
    params: &EncoderParams,
    dataset: &Dataset,
    rows: &[usize],
    voxels: &[usize],
) -> Result<(f64, EncoderParams)> {
    let scale = 1.0 / (rows.len() * voxels.len()) as f64;
    let parts: Vec<(f64, EncoderParams)> = rows
        .par_iter()
        .map(|&r| {
            let cache = forward(params, dataset.tokens(r), voxels)?;
            let pred = cache.predictions();
            let target: Array1<f64> = voxels.iter().map(|&v| dataset.target(r, v)).collect();
            let err = pred - &target;
            let loss = err.dot(&err) * scale;
            let dy = err * (2.0 * scale);
            let mut g = params.zeros_like();
            backward_accumulate(params, &cache, dy.view(), &mut g, false)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = params.zeros_like();
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss, total))
}

/// AdamW under a OneCycle schedule; validation R̄² after each evaluated
/// epoch selects the returned parameters.
pub fn train(
    init: EncoderParams,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainOutcome> {
    config.validate()?;
    if init.config().n_voxels != dataset.n_voxels() || init.config().token_dim != dataset.token_dim() {
        return Err(Error::Shape(
            "encoder config does not match the dataset's voxels or token width".into(),
        ));
    }
    let train_rows = dataset.split_rows("train")?;
    if train_rows.is_empty() || dataset.splits().val.is_empty() {
        return Err(Error::InsufficientData("training needs train and val splits".into()));
    }
    let spe = config.resolved_steps_per_epoch(train_rows.len());
    let mut schedule = config.schedule;
    if schedule.total_steps == 0 {
        schedule.total_steps = config.epochs * spe;
    }
    let n_vox = dataset.n_voxels();
    let per_batch = config.voxels_per_batch.min(n_vox);
    let batch = config.images_per_batch.min(train_rows.len());

    let mut params = init;
    let mut state = OptimState::new(params.len(), config.optimizer);
    let mut best = params.clone();
    let mut best_epoch = 0;
    let mut best_val = f64::NEG_INFINITY;
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..config.epochs {
        let mut rng = seed::rng_for(config.seed, &[seed::TRAIN, epoch as u64]);
        let mut order = train_rows.clone();
        order.shuffle(&mut rng);
        let mut cursor = 0;
        for s in 0..spe {
            let mut rows = Vec::with_capacity(batch);
            while rows.len() < batch {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                rows.push(order[cursor]);
                cursor += 1;
            }
            let mut voxels = index::sample(&mut rng, n_vox, per_batch).into_vec();
            voxels.sort_unstable();
            let lr = onecycle_lr(&schedule, step.min(schedule.total_steps))?;
            let (loss, grads) = batch_gradient(&params, dataset, &rows, &voxels)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { step, loss });
            }
            adamw_step(params.as_mut_slice(), grads.as_slice(), &mut state, lr)?;
            let last_in_epoch = s + 1 == spe;
            let evaluate = last_in_epoch
                && ((epoch + 1) % config.eval_every == 0 || epoch + 1 == config.epochs);
            let val_r2 = if evaluate {
                let r = evaluate_r2(&params, dataset, "val")?.mean;
                if r > best_val {
                    best_val = r;
                    best_epoch = epoch;
                    best = params.clone();
                }
                Some(r)
            } else {
                None
            };
            let entry = LogEntry {
                step,
                epoch,
                lr,
                loss,
                val_r2,
            };
            on_log(&entry);
            log.push(entry);
            step += 1;
        }
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_r2: best_val,
        last: params,
        log,
    })
}
