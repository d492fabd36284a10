use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::forward::{backward, forward, ig_token_scores};
use super::EncoderParams;
use crate::error::{Error, Result};

/// A scalar-per-voxel model of a token sequence, as seen by attribution.
pub trait TokenModel: Sync {
    fn token_dim(&self) -> usize;

    /// Predictions for each requested voxel.
    fn predict(&self, tokens: ArrayView2<f64>, voxel_ids: &[usize]) -> Result<Array1<f64>>;

    /// Prediction of one voxel and its gradient wrt every token entry.
    fn token_gradient(&self, tokens: ArrayView2<f64>, voxel: usize) -> Result<(f64, Array2<f64>)>;

    /// Left-Riemann integrated gradients along `B + α(X − B)`, `α = i/m`,
    /// reduced to signed per-token scores (`voxels × s`).
    fn integrated_gradients(
        &self,
        tokens: ArrayView2<f64>,
        baseline: ArrayView2<f64>,
        voxel_ids: &[usize],
        steps: usize,
    ) -> Result<Array2<f64>> {
        riemann_ig(self, tokens, baseline, voxel_ids, steps)
    }
}

/// Reference integrated gradients from explicit token gradients.
pub fn riemann_ig<M: TokenModel + ?Sized>(
    model: &M,
    tokens: ArrayView2<f64>,
    baseline: ArrayView2<f64>,
    voxel_ids: &[usize],
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs m ≥ 1".into()));
    }
    if tokens.raw_dim() != baseline.raw_dim() {
        return Err(Error::Shape("baseline sequence shape differs from tokens".into()));
    }
    let delta = &tokens - &baseline;
    let mut out = Array2::zeros((voxel_ids.len(), tokens.nrows()));
    for (row, &v) in voxel_ids.iter().enumerate() {
        let mut total = Array2::<f64>::zeros(tokens.raw_dim());
        for i in 0..steps {
            let alpha = i as f64 / steps as f64;
            let point = &baseline + &(&delta * alpha);
            let (_, g) = model.token_gradient(point.view(), v)?;
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient at α = {alpha}")));
            }
            total += &g;
        }
        for j in 0..tokens.nrows() {
            out[(row, j)] = total.row(j).dot(&delta.row(j)) / steps as f64;
        }
    }
    Ok(out)
}

impl TokenModel for EncoderParams {
    fn token_dim(&self) -> usize {
        self.config().token_dim
    }

    fn predict(&self, tokens: ArrayView2<f64>, voxel_ids: &[usize]) -> Result<Array1<f64>> {
        Ok(forward(self, tokens, voxel_ids)?.predictions().clone())
    }

    fn token_gradient(&self, tokens: ArrayView2<f64>, voxel: usize) -> Result<(f64, Array2<f64>)> {
        let cache = forward(self, tokens, &[voxel])?;
        let (_, dx) = backward(self, &cache, Array1::ones(1).view())?;
        Ok((cache.predictions()[0], dx))
    }

    fn integrated_gradients(
        &self,
        tokens: ArrayView2<f64>,
        baseline: ArrayView2<f64>,
        voxel_ids: &[usize],
        steps: usize,
    ) -> Result<Array2<f64>> {
        ig_token_scores(self, tokens, baseline, voxel_ids, steps)
    }
}

/// `ŷ_v = Σ_j w_v·x_j + c_v`: a model whose integrated gradients are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    /// `n_voxels × d_s`.
    pub weights: Array2<f64>,
    pub intercepts: Array1<f64>,
}

impl TokenModel for LinearProbe {
    fn token_dim(&self) -> usize {
        self.weights.ncols()
    }

    fn predict(&self, tokens: ArrayView2<f64>, voxel_ids: &[usize]) -> Result<Array1<f64>> {
        if tokens.ncols() != self.weights.ncols() {
            return Err(Error::Shape("token width differs from probe".into()));
        }
        let pooled = tokens.sum_axis(ndarray::Axis(0));
        voxel_ids
            .iter()
            .map(|&v| {
                if v >= self.weights.nrows() {
                    return Err(Error::OutOfRange(format!("voxel {v}")));
                }
                Ok(self.weights.row(v).dot(&pooled) + self.intercepts[v])
            })
            .collect()
    }

    fn token_gradient(&self, tokens: ArrayView2<f64>, voxel: usize) -> Result<(f64, Array2<f64>)> {
        let y = self.predict(tokens, &[voxel])?[0];
        let mut g = Array2::zeros(tokens.raw_dim());
        for mut row in g.rows_mut() {
            row.assign(&self.weights.row(voxel));
        }
        Ok((y, g))
    }
}

/// Mean squared error over the batch and its gradient `2(ŷ − y)/n`.
pub fn mse_loss(pred: ArrayView1<f64>, target: ArrayView1<f64>) -> Result<(f64, Array1<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::Empty("mse over an empty batch".into()));
    }
    let n = pred.len() as f64;
    let mut grad = Array1::zeros(pred.len());
    let mut loss = 0.0;
    Zip::from(&mut grad)
        .and(&pred)
        .and(&target)
        .for_each(|g, &p, &t| {
            let e = p - t;
            loss += e * e;
            *g = 2.0 * e / n;
        });
    Ok((loss / n, grad))
}
