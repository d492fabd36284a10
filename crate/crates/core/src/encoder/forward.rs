//! Forward and backward passes for one token sequence and a batch of voxels.
//!
//! Row-vector convention throughout. For voxel `v` and tokens `X` (`s × d_s`):
//!
//! ```text
//! q  = RMS(e_v)·W_Q          K = X·W_K    V = X·W_V
//! a  = concat_h softmax(q_h K_hᵀ / √d_head) V_h
//! h1 = e_v + a·W_O
//! h2 = h1 + gelu(RMS(h1)·W₁ + b₁)·W₂ + b₂
//! ŷ  = w_v·h2 + c_v
//! ```
//!
//! Each voxel's prediction depends only on its own row, so a batch of voxels
//! on one image shares `K` and `V`.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut2, Axis, Zip};

use super::EncoderParams;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // √(2/π)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of gelu.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Intermediates of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    stamp: u64,
    voxel_ids: Vec<usize>,
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    emb: Array2<f64>,
    r1: Array1<f64>,
    z1: Array2<f64>,
    q: Array2<f64>,
    attn: Vec<Array2<f64>>,
    a: Array2<f64>,
    h1: Array2<f64>,
    r2: Array1<f64>,
    z2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
    h2: Array2<f64>,
    predictions: Array1<f64>,
}

impl ForwardCache {
    pub fn predictions(&self) -> &Array1<f64> {
        &self.predictions
    }

    pub fn voxel_ids(&self) -> &[usize] {
        &self.voxel_ids
    }

    /// Attention weights `g(v, x)` of one head, `n_voxels × s`.
    pub fn attention(&self, head: usize) -> ArrayView2<'_, f64> {
        self.attn[head].view()
    }

    pub fn keys(&self) -> ArrayView2<'_, f64> {
        self.keys.view()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn queries(&self) -> ArrayView2<'_, f64> {
        self.q.view()
    }
}

/// Row-wise RMS normalization: returns `(x̂ ⊙ g, r)` with `x̂ = r·x`,
/// `r = (mean(x²) + ε)^(-1/2)`.
fn rms_norm(x: &Array2<f64>, gain: ArrayView1<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let r: Array1<f64> = x
        .rows()
        .into_iter()
        .map(|row| 1.0 / (row.dot(&row) / d + eps).sqrt())
        .collect();
    let mut z = x.clone();
    Zip::from(z.rows_mut()).and(&r).for_each(|mut row, &ri| {
        row.zip_mut_with(&gain, |v, &g| *v *= ri * g);
    });
    (z, r)
}

/// Gradient of `x̂ = r·x` wrt `x`, given `dx̂`: `r·dx̂ − r³·x·(x·dx̂)/d`.
fn rms_backward(x: &Array2<f64>, r: &Array1<f64>, dxhat: &Array2<f64>) -> Array2<f64> {
    let d = x.ncols() as f64;
    let mut out = Array2::zeros(x.raw_dim());
    Zip::from(out.rows_mut())
        .and(x.rows())
        .and(dxhat.rows())
        .and(r)
        .for_each(|mut o, xr, dr, &ri| {
            let dot = xr.dot(&dr);
            let c = ri * ri * ri * dot / d;
            Zip::from(&mut o).and(&xr).and(&dr).for_each(|o, &xv, &dv| {
                *o = ri * dv - c * xv;
            });
        });
    out
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
}

fn check_tokens(params: &EncoderParams, tokens: ArrayView2<f64>) -> Result<()> {
    let ds = params.config().token_dim;
    if tokens.ncols() != ds || tokens.nrows() == 0 {
        return Err(Error::Shape(format!(
            "tokens are {}×{}, encoder expects s×{ds} with s ≥ 1",
            tokens.nrows(),
            tokens.ncols()
        )));
    }
    if tokens.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("input tokens".into()));
    }
    Ok(())
}

fn check_voxels(params: &EncoderParams, voxel_ids: &[usize]) -> Result<()> {
    let n = params.config().n_voxels;
    match voxel_ids.iter().find(|&&v| v >= n) {
        Some(v) => Err(Error::OutOfRange(format!("voxel {v} ≥ n_voxels {n}"))),
        None => Ok(()),
    }
}

/// Key and value projections of a token sequence.
pub fn project_tokens(params: &EncoderParams, tokens: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
    let p = params.views();
    (tokens.dot(&p.w_k), tokens.dot(&p.w_v))
}

pub fn forward(
    params: &EncoderParams,
    tokens: ArrayView2<f64>,
    voxel_ids: &[usize],
) -> Result<ForwardCache> {
    check_tokens(params, tokens)?;
    check_voxels(params, voxel_ids)?;
    let (keys, values) = project_tokens(params, tokens);
    Ok(forward_from_kv(params, tokens.to_owned(), keys, values, voxel_ids))
}

/// Predictions only, from precomputed key/value projections.
pub fn predict_from_kv(
    params: &EncoderParams,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    voxel_ids: &[usize],
) -> Array1<f64> {
    forward_from_kv(
        params,
        Array2::zeros((0, 0)),
        keys.to_owned(),
        values.to_owned(),
        voxel_ids,
    )
    .predictions
}

pub(crate) fn forward_from_kv(
    params: &EncoderParams,
    tokens: Array2<f64>,
    keys: Array2<f64>,
    values: Array2<f64>,
    voxel_ids: &[usize],
) -> ForwardCache {
    let c = params.config();
    let p = params.views();
    let (n, dv, dh) = (voxel_ids.len(), c.model_dim, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();

    let mut emb = Array2::zeros((n, dv));
    for (i, &v) in voxel_ids.iter().enumerate() {
        emb.row_mut(i).assign(&p.voxel_embeddings.row(v));
    }
    let (z1, r1) = rms_norm(&emb, p.gain_attn, c.rms_epsilon);
    let q = z1.dot(&p.w_q);

    let mut a = Array2::zeros((n, dv));
    let mut attn = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut scores = q.slice(cols).dot(&keys.slice(cols).t());
        scores *= scale;
        softmax_rows(&mut scores);
        a.slice_mut(cols).assign(&scores.dot(&values.slice(cols)));
        attn.push(scores);
    }

    let mut h1 = a.dot(&p.w_o);
    h1 += &emb;
    let (z2, r2) = rms_norm(&h1, p.gain_ffn, c.rms_epsilon);
    let mut u = z2.dot(&p.w1);
    u += &p.b1;
    let g = u.mapv(gelu);
    let mut h2 = g.dot(&p.w2);
    h2 += &p.b2;
    h2 += &h1;

    let predictions = voxel_ids
        .iter()
        .enumerate()
        .map(|(i, &v)| p.head_w.row(v).dot(&h2.row(i)) + p.head_b[v])
        .collect();

    ForwardCache {
        stamp: params.stamp(),
        voxel_ids: voxel_ids.to_vec(),
        tokens,
        keys,
        values,
        emb,
        r1,
        z1,
        q,
        attn,
        a,
        h1,
        r2,
        z2,
        u,
        g,
        h2,
        predictions,
    }
}

/// Upstream gradients at the attention scores and attention outputs.
pub(crate) struct AttentionGrads {
    /// Per head, gradient wrt the (unscaled) softmax logits `q_h K_hᵀ·scale`.
    pub d_scores: Vec<Array2<f64>>,
    /// Gradient wrt the concatenated attention output `a`.
    pub d_attn_out: Array2<f64>,
}

fn col_sum_into(dst: &mut ndarray::ArrayViewMut1<f64>, m: &Array2<f64>) {
    *dst += &m.sum_axis(Axis(0));
}

fn acc(dst: &mut ArrayViewMut2<f64>, a: ArrayView2<f64>, b: ArrayView2<f64>) {
    general_mat_mul(1.0, &a, &b, 1.0, dst);
}

/// Backward pass down to the attention block. Accumulates parameter
/// gradients into `grads` when given; returns the attention-level gradients
/// and the gradients wrt keys and values.
pub(crate) fn backward_core(
    params: &EncoderParams,
    cache: &ForwardCache,
    dy: ArrayView1<f64>,
    mut grads: Option<&mut EncoderParams>,
) -> Result<(AttentionGrads, Array2<f64>, Array2<f64>)> {
    if cache.stamp != params.stamp() {
        return Err(Error::StaleCache(
            "parameters changed since the forward pass".into(),
        ));
    }
    let n = cache.voxel_ids.len();
    if dy.len() != n {
        return Err(Error::Shape(format!(
            "upstream gradient has {} entries for {n} voxels",
            dy.len()
        )));
    }
    let c = params.config();
    let p = params.views();
    let (dv, dh) = (c.model_dim, c.head_dim());
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gm = grads.as_deref_mut().map(|g| g.views_mut());

    // output heads
    let mut dh2 = Array2::zeros((n, dv));
    for (i, &v) in cache.voxel_ids.iter().enumerate() {
        dh2.row_mut(i).scaled_add(dy[i], &p.head_w.row(v));
        if let Some(g) = gm.as_mut() {
            g.head_w.row_mut(v).scaled_add(dy[i], &cache.h2.row(i));
            g.head_b[v] += dy[i];
        }
    }

    // feedforward block
    if let Some(g) = gm.as_mut() {
        acc(&mut g.w2, cache.g.t(), dh2.view());
        col_sum_into(&mut g.b2, &dh2);
    }
    let mut du = dh2.dot(&p.w2.t());
    Zip::from(&mut du).and(&cache.u).for_each(|d, &u| *d *= gelu_grad(u));
    if let Some(g) = gm.as_mut() {
        acc(&mut g.w1, cache.z2.t(), du.view());
        col_sum_into(&mut g.b1, &du);
    }
    let dz2 = du.dot(&p.w1.t());
    let mut h1hat = cache.h1.clone();
    Zip::from(h1hat.rows_mut()).and(&cache.r2).for_each(|mut row, &r| row *= r);
    if let Some(g) = gm.as_mut() {
        col_sum_into(&mut g.gain_ffn, &(&dz2 * &h1hat));
    }
    let dh1hat = &dz2 * &p.gain_ffn;
    let mut dh1 = rms_backward(&cache.h1, &cache.r2, &dh1hat);
    dh1 += &dh2;

    // attention block
    if let Some(g) = gm.as_mut() {
        acc(&mut g.w_o, cache.a.t(), dh1.view());
    }
    let da = dh1.dot(&p.w_o.t());
    let mut de = dh1;
    let s_len = cache.keys.nrows();
    let mut dq = Array2::zeros((n, dv));
    let mut dk = Array2::zeros((s_len, dv));
    let mut dvals = Array2::zeros((s_len, dv));
    let mut d_scores = Vec::with_capacity(c.n_heads);
    for h in 0..c.n_heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let prob = &cache.attn[h];
        let da_h = da.slice(cols);
        let dp = da_h.dot(&cache.values.slice(cols).t());
        general_mat_mul(1.0, &prob.t(), &da_h, 1.0, &mut dvals.slice_mut(cols));
        let mut ds = prob * &dp;
        let row_dot = ds.sum_axis(Axis(1));
        Zip::from(ds.rows_mut())
            .and(prob.rows())
            .and(&row_dot)
            .for_each(|mut d, pr, &rd| {
                Zip::from(&mut d).and(&pr).for_each(|d, &pv| *d -= pv * rd);
            });
        general_mat_mul(scale, &ds, &cache.keys.slice(cols), 0.0, &mut dq.slice_mut(cols));
        general_mat_mul(scale, &ds.t(), &cache.q.slice(cols), 1.0, &mut dk.slice_mut(cols));
        d_scores.push(ds);
    }

    if let Some(g) = gm.as_mut() {
        acc(&mut g.w_q, cache.z1.t(), dq.view());
    }
    let dz1 = dq.dot(&p.w_q.t());
    let mut ehat = cache.emb.clone();
    Zip::from(ehat.rows_mut()).and(&cache.r1).for_each(|mut row, &r| row *= r);
    if let Some(g) = gm.as_mut() {
        col_sum_into(&mut g.gain_attn, &(&dz1 * &ehat));
    }
    let dehat = &dz1 * &p.gain_attn;
    de += &rms_backward(&cache.emb, &cache.r1, &dehat);
    if let Some(g) = gm.as_mut() {
        for (i, &v) in cache.voxel_ids.iter().enumerate() {
            let mut row = g.voxel_embeddings.row_mut(v);
            row += &de.row(i);
        }
    }

    Ok((
        AttentionGrads {
            d_scores,
            d_attn_out: da,
        },
        dk,
        dvals,
    ))
}

/// Gradients of `Σ_i dy_i·ŷ_i` wrt every parameter and every token entry.
pub fn backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    dy: ArrayView1<f64>,
) -> Result<(EncoderParams, Array2<f64>)> {
    let mut grads = params.zeros_like();
    let dx = backward_accumulate(params, cache, dy, &mut grads, true)?;
    Ok((grads, dx.expect("token gradient requested")))
}

/// Adds parameter gradients into `grads`; returns the token gradient when
/// `want_tokens` is set.
pub fn backward_accumulate(
    params: &EncoderParams,
    cache: &ForwardCache,
    dy: ArrayView1<f64>,
    grads: &mut EncoderParams,
    want_tokens: bool,
) -> Result<Option<Array2<f64>>> {
    if grads.config() != params.config() {
        return Err(Error::Shape("gradient buffer has a different config".into()));
    }
    if cache.tokens.nrows() != cache.keys.nrows() {
        return Err(Error::StaleCache("cache was built without input tokens".into()));
    }
    let (_, dk, dvals) = backward_core(params, cache, dy, Some(&mut *grads))?;
    {
        let mut g = grads.views_mut();
        acc(&mut g.w_k, cache.tokens.t(), dk.view());
        acc(&mut g.w_v, cache.tokens.t(), dvals.view());
    }
    Ok(want_tokens.then(|| {
        let p = params.views();
        let mut dx = dk.dot(&p.w_k.t());
        general_mat_mul(1.0, &dvals, &p.w_v.t(), 1.0, &mut dx);
        dx
    }))
}

/// Left-Riemann integrated gradients for a batch of voxels on one image,
/// reduced to signed per-token scores (`n_voxels × s`).
///
/// `K` and `V` are linear in the tokens, so along the path
/// `X_α = B + α(X − B)` the directional derivative of `ŷ_i` splits into a
/// key term `Σ_h dS_h[i,j]·(q_h[i]·ΔK_h[j])·scale` and a value term
/// `Σ_h P_h[i,j]·(dA_h[i]·ΔV_h[j])`, with `ΔK = (X − B)·W_K` and likewise
/// for `V`. No parameter gradients are formed.
pub fn ig_token_scores(
    params: &EncoderParams,
    tokens: ArrayView2<f64>,
    baseline: ArrayView2<f64>,
    voxel_ids: &[usize],
    steps: usize,
) -> Result<Array2<f64>> {
    if steps == 0 {
        return Err(Error::Config("integrated gradients needs m ≥ 1".into()));
    }
    check_tokens(params, tokens)?;
    check_tokens(params, baseline)?;
    check_voxels(params, voxel_ids)?;
    if tokens.raw_dim() != baseline.raw_dim() {
        return Err(Error::Shape("baseline sequence shape differs from tokens".into()));
    }
    let c = params.config();
    let dh = c.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let (kb, vb) = project_tokens(params, baseline);
    let (kx, vx) = project_tokens(params, tokens);
    let dk_path = &kx - &kb;
    let dv_path = &vx - &vb;
    let n = voxel_ids.len();
    let s_len = tokens.nrows();
    let mut scores = Array2::zeros((n, s_len));
    let ones = Array1::ones(n);
    for i in 0..steps {
        let alpha = i as f64 / steps as f64;
        let keys = &kb + &(&dk_path * alpha);
        let values = &vb + &(&dv_path * alpha);
        let cache = forward_from_kv(params, Array2::zeros((0, 0)), keys, values, voxel_ids);
        let (grads, _, _) = backward_core(params, &cache, ones.view(), None)?;
        for h in 0..c.n_heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qk = cache.q.slice(cols).dot(&dk_path.slice(cols).t());
            let av = grads.d_attn_out.slice(cols).dot(&dv_path.slice(cols).t());
            Zip::from(&mut scores)
                .and(&grads.d_scores[h])
                .and(&qk)
                .and(&cache.attn[h])
                .and(&av)
                .for_each(|s, &ds, &qk, &pr, &av| *s += ds * qk * scale + pr * av);
        }
    }
    scores /= steps as f64;
    Ok(scores)
}
