use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::seed;

/// Parameter tensors in checkpoint payload order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tensor {
    VoxelEmbeddings,
    WQ,
    WK,
    WV,
    WO,
    RmsGainAttn,
    W1,
    B1,
    W2,
    B2,
    RmsGainFfn,
    HeadW,
    HeadB,
}

impl Tensor {
    pub const ALL: [Tensor; 13] = [
        Tensor::VoxelEmbeddings,
        Tensor::WQ,
        Tensor::WK,
        Tensor::WV,
        Tensor::WO,
        Tensor::RmsGainAttn,
        Tensor::W1,
        Tensor::B1,
        Tensor::W2,
        Tensor::B2,
        Tensor::RmsGainFfn,
        Tensor::HeadW,
        Tensor::HeadB,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Tensor::VoxelEmbeddings => "voxel_embeddings",
            Tensor::WQ => "w_q",
            Tensor::WK => "w_k",
            Tensor::WV => "w_v",
            Tensor::WO => "w_o",
            Tensor::RmsGainAttn => "rms_gain_attn",
            Tensor::W1 => "ffn_w1",
            Tensor::B1 => "ffn_b1",
            Tensor::W2 => "ffn_w2",
            Tensor::B2 => "ffn_b2",
            Tensor::RmsGainFfn => "rms_gain_ffn",
            Tensor::HeadW => "head_w",
            Tensor::HeadB => "head_b",
        }
    }

    pub fn shape(self, c: &EncoderConfig) -> Vec<usize> {
        let (dv, ds, hid, v) = (c.model_dim, c.token_dim, c.hidden_dim(), c.n_voxels);
        match self {
            Tensor::VoxelEmbeddings | Tensor::HeadW => vec![v, dv],
            Tensor::WQ | Tensor::WO => vec![dv, dv],
            Tensor::WK | Tensor::WV => vec![ds, dv],
            Tensor::RmsGainAttn | Tensor::RmsGainFfn | Tensor::B2 => vec![dv],
            Tensor::W1 => vec![dv, hid],
            Tensor::B1 => vec![hid],
            Tensor::W2 => vec![hid, dv],
            Tensor::HeadB => vec![v],
        }
    }

    fn len(self, c: &EncoderConfig) -> usize {
        self.shape(c).iter().product()
    }

    /// Scale of the Gaussian initializer; `None` for constant-initialized tensors.
    fn init_sd(self, c: &EncoderConfig) -> Option<f64> {
        match self {
            Tensor::WK | Tensor::WV => Some(1.0 / (c.token_dim as f64).sqrt()),
            Tensor::W2 => Some(1.0 / (c.hidden_dim() as f64).sqrt()),
            Tensor::VoxelEmbeddings | Tensor::HeadW | Tensor::WQ | Tensor::WO | Tensor::W1 => {
                Some(1.0 / (c.model_dim as f64).sqrt())
            }
            _ => None,
        }
    }

    fn init_const(self) -> f64 {
        match self {
            Tensor::RmsGainAttn | Tensor::RmsGainFfn => 1.0,
            _ => 0.0,
        }
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// All encoder parameters in one flat buffer laid out in [`Tensor::ALL`]
/// order. The same type holds gradients and optimizer moments.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    config: EncoderConfig,
    data: Vec<f64>,
    // changes on every mutable access so forward caches can detect staleness
    stamp: u64,
}

impl PartialEq for EncoderParams {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.data == other.data
    }
}

pub struct ParamsRef<'a> {
    pub voxel_embeddings: ArrayView2<'a, f64>,
    pub w_q: ArrayView2<'a, f64>,
    pub w_k: ArrayView2<'a, f64>,
    pub w_v: ArrayView2<'a, f64>,
    pub w_o: ArrayView2<'a, f64>,
    pub gain_attn: ArrayView1<'a, f64>,
    pub w1: ArrayView2<'a, f64>,
    pub b1: ArrayView1<'a, f64>,
    pub w2: ArrayView2<'a, f64>,
    pub b2: ArrayView1<'a, f64>,
    pub gain_ffn: ArrayView1<'a, f64>,
    pub head_w: ArrayView2<'a, f64>,
    pub head_b: ArrayView1<'a, f64>,
}

pub struct ParamsMut<'a> {
    pub voxel_embeddings: ArrayViewMut2<'a, f64>,
    pub w_q: ArrayViewMut2<'a, f64>,
    pub w_k: ArrayViewMut2<'a, f64>,
    pub w_v: ArrayViewMut2<'a, f64>,
    pub w_o: ArrayViewMut2<'a, f64>,
    pub gain_attn: ArrayViewMut1<'a, f64>,
    pub w1: ArrayViewMut2<'a, f64>,
    pub b1: ArrayViewMut1<'a, f64>,
    pub w2: ArrayViewMut2<'a, f64>,
    pub b2: ArrayViewMut1<'a, f64>,
    pub gain_ffn: ArrayViewMut1<'a, f64>,
    pub head_w: ArrayViewMut2<'a, f64>,
    pub head_b: ArrayViewMut1<'a, f64>,
}

fn v2<'a>(c: &EncoderConfig, t: Tensor, s: &'a [f64]) -> ArrayView2<'a, f64> {
    let sh = t.shape(c);
    ArrayView2::from_shape((sh[0], sh[1]), s).expect("layout")
}

fn v1<'a>(s: &'a [f64]) -> ArrayView1<'a, f64> {
    ArrayView1::from(s)
}

fn m2<'a>(c: &EncoderConfig, t: Tensor, s: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
    let sh = t.shape(c);
    ArrayViewMut2::from_shape((sh[0], sh[1]), s).expect("layout")
}

fn m1<'a>(s: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(s)
}

impl EncoderParams {
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let n = Tensor::ALL.iter().map(|t| t.len(config)).sum();
        Ok(Self {
            config: config.clone(),
            data: vec![0.0; n],
            stamp: fresh_stamp(),
        })
    }

    /// Gaussian matrices with sd `1/√fan_in` (fan-in `d_v` for the per-voxel
    /// tables), RMS gains 1, biases and intercepts 0.
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let mut rng = seed::rng_for(seed, &[seed::ENCODER_INIT]);
        for t in Tensor::ALL {
            let sd = t.init_sd(config);
            let c = t.init_const();
            let slot = p.tensor_mut(t);
            match sd {
                Some(sd) => {
                    let normal = Normal::new(0.0, sd).expect("valid sd");
                    slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                None => slot.fill(c),
            }
        }
        Ok(p)
    }

    /// Wraps a flat payload, checking its length against `config`.
    pub fn from_flat(config: &EncoderConfig, data: Vec<f64>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(Error::Shape(format!(
                "parameter payload has {} values, config implies {}",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config.clone(),
            data: vec![0.0; self.data.len()],
            stamp: fresh_stamp(),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub(crate) fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        self.stamp = fresh_stamp();
        &mut self.data
    }

    pub fn range(&self, t: Tensor) -> std::ops::Range<usize> {
        let mut start = 0;
        for u in Tensor::ALL {
            let n = u.len(&self.config);
            if u == t {
                return start..start + n;
            }
            start += n;
        }
        unreachable!("every tensor is in ALL")
    }

    pub fn tensor(&self, t: Tensor) -> &[f64] {
        &self.data[self.range(t)]
    }

    pub fn tensor_mut(&mut self, t: Tensor) -> &mut [f64] {
        let r = self.range(t);
        &mut self.as_mut_slice()[r]
    }

    pub fn views(&self) -> ParamsRef<'_> {
        let c = &self.config;
        let mut rest = self.data.as_slice();
        let mut take = |t: Tensor| {
            let (head, tail) = rest.split_at(t.len(c));
            rest = tail;
            head
        };
        ParamsRef {
            voxel_embeddings: v2(c, Tensor::VoxelEmbeddings, take(Tensor::VoxelEmbeddings)),
            w_q: v2(c, Tensor::WQ, take(Tensor::WQ)),
            w_k: v2(c, Tensor::WK, take(Tensor::WK)),
            w_v: v2(c, Tensor::WV, take(Tensor::WV)),
            w_o: v2(c, Tensor::WO, take(Tensor::WO)),
            gain_attn: v1(take(Tensor::RmsGainAttn)),
            w1: v2(c, Tensor::W1, take(Tensor::W1)),
            b1: v1(take(Tensor::B1)),
            w2: v2(c, Tensor::W2, take(Tensor::W2)),
            b2: v1(take(Tensor::B2)),
            gain_ffn: v1(take(Tensor::RmsGainFfn)),
            head_w: v2(c, Tensor::HeadW, take(Tensor::HeadW)),
            head_b: v1(take(Tensor::HeadB)),
        }
    }

    pub fn views_mut(&mut self) -> ParamsMut<'_> {
        self.stamp = fresh_stamp();
        let c = &self.config;
        let mut rest = self.data.as_mut_slice();
        let mut take = |t: Tensor| {
            let (head, tail) = std::mem::take(&mut rest).split_at_mut(t.len(c));
            rest = tail;
            head
        };
        ParamsMut {
            voxel_embeddings: m2(c, Tensor::VoxelEmbeddings, take(Tensor::VoxelEmbeddings)),
            w_q: m2(c, Tensor::WQ, take(Tensor::WQ)),
            w_k: m2(c, Tensor::WK, take(Tensor::WK)),
            w_v: m2(c, Tensor::WV, take(Tensor::WV)),
            w_o: m2(c, Tensor::WO, take(Tensor::WO)),
            gain_attn: m1(take(Tensor::RmsGainAttn)),
            w1: m2(c, Tensor::W1, take(Tensor::W1)),
            b1: m1(take(Tensor::B1)),
            w2: m2(c, Tensor::W2, take(Tensor::W2)),
            b2: m1(take(Tensor::B2)),
            gain_ffn: m1(take(Tensor::RmsGainFfn)),
            head_w: m2(c, Tensor::HeadW, take(Tensor::HeadW)),
            head_b: m1(take(Tensor::HeadB)),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self += other`, elementwise.
    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.config, other.config);
        for (a, b) in self.as_mut_slice().iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f64) {
        self.as_mut_slice().fill(value);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> EncoderConfig {
        EncoderConfig {
            token_dim: 5,
            model_dim: 4,
            n_heads: 2,
            ffn_expansion: 2,
            n_voxels: 3,
            rms_epsilon: 1e-6,
        }
    }

    #[test]
    fn gains_are_one_and_biases_zero() {
        let p = EncoderParams::init(&small(), 3).unwrap();
        assert!(p.tensor(Tensor::RmsGainAttn).iter().all(|&g| g == 1.0));
        assert!(p.tensor(Tensor::RmsGainFfn).iter().all(|&g| g == 1.0));
        for t in [Tensor::B1, Tensor::B2, Tensor::HeadB] {
            assert!(p.tensor(t).iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = EncoderParams::init(&small(), 9).unwrap();
        let b = EncoderParams::init(&small(), 9).unwrap();
        assert_eq!(a.as_slice(), b.as_slice());
        assert_ne!(a, EncoderParams::init(&small(), 10).unwrap());
    }

    #[test]
    fn views_match_ranges() {
        let mut p = EncoderParams::zeros(&small()).unwrap();
        for (i, v) in p.as_mut_slice().iter_mut().enumerate() {
            *v = i as f64;
        }
        let views = p.views();
        let r = p.range(Tensor::WK);
        assert_eq!(views.w_k[(0, 0)], r.start as f64);
        assert_eq!(views.w_k.shape(), &[5, 4]);
        assert_eq!(views.head_b[2], (p.len() - 1) as f64);
    }

    #[test]
    fn mutation_renews_stamp() {
        let mut p = EncoderParams::zeros(&small()).unwrap();
        let s = p.stamp();
        p.tensor_mut(Tensor::WQ)[0] = 1.0;
        assert_ne!(p.stamp(), s);
    }
}
