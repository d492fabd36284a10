use mine_core::encoder::{
    backward, backward_accumulate, forward, mse_loss, riemann_ig, EncoderConfig, EncoderParams,
    Tensor, TokenModel,
};
use mine_core::world::FeatureDictionary;
use mine_core::Error;
use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cfg(ds: usize, dv: usize, heads: usize, voxels: usize) -> EncoderConfig {
    EncoderConfig {
        token_dim: ds,
        model_dim: dv,
        n_heads: heads,
        ffn_expansion: 2,
        n_voxels: voxels,
        rms_epsilon: 1e-6,
    }
}

fn random_tokens(s: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((s, d), |_| rng.sample(StandardNormal))
}

/// Params with non-trivial gains and biases so every path is exercised.
fn perturbed(config: &EncoderConfig, seed: u64) -> EncoderParams {
    let mut p = EncoderParams::init(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
    for t in [
        Tensor::RmsGainAttn,
        Tensor::RmsGainFfn,
        Tensor::B1,
        Tensor::B2,
        Tensor::HeadB,
    ] {
        for v in p.tensor_mut(t) {
            *v += 0.3 * rng.sample::<f64, _>(StandardNormal);
        }
    }
    p
}

// Plain scalar loops over the flat parameter buffer.
fn reference_forward(p: &EncoderParams, x: &Array2<f64>, voxel: usize) -> f64 {
    let c = p.config();
    let (ds, dv, nh, hid) = (c.token_dim, c.model_dim, c.n_heads, c.hidden_dim());
    let dh = dv / nh;
    let s = x.nrows();
    let at = |t: Tensor, i: usize, j: usize, cols: usize| p.tensor(t)[i * cols + j];
    let vec_at = |t: Tensor, i: usize| p.tensor(t)[i];

    let e: Vec<f64> = (0..dv).map(|j| at(Tensor::VoxelEmbeddings, voxel, j, dv)).collect();
    let rms = |v: &[f64]| {
        let ms: f64 = v.iter().map(|a| a * a).sum::<f64>() / v.len() as f64;
        1.0 / (ms + c.rms_epsilon).sqrt()
    };
    let r1 = rms(&e);
    let z1: Vec<f64> = (0..dv).map(|j| e[j] * r1 * vec_at(Tensor::RmsGainAttn, j)).collect();
    let mut q = vec![0.0; dv];
    for j in 0..dv {
        for i in 0..dv {
            q[j] += z1[i] * at(Tensor::WQ, i, j, dv);
        }
    }
    let mut k = vec![vec![0.0; dv]; s];
    let mut v = vec![vec![0.0; dv]; s];
    for t in 0..s {
        for j in 0..dv {
            for i in 0..ds {
                k[t][j] += x[(t, i)] * at(Tensor::WK, i, j, dv);
                v[t][j] += x[(t, i)] * at(Tensor::WV, i, j, dv);
            }
        }
    }
    let mut a = vec![0.0; dv];
    for h in 0..nh {
        let mut logits = vec![0.0; s];
        for t in 0..s {
            for j in h * dh..(h + 1) * dh {
                logits[t] += q[j] * k[t][j];
            }
            logits[t] /= (dh as f64).sqrt();
        }
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
        let z: f64 = w.iter().sum();
        for t in 0..s {
            for j in h * dh..(h + 1) * dh {
                a[j] += w[t] / z * v[t][j];
            }
        }
    }
    let mut h1 = e.clone();
    for j in 0..dv {
        for i in 0..dv {
            h1[j] += a[i] * at(Tensor::WO, i, j, dv);
        }
    }
    let r2 = rms(&h1);
    let z2: Vec<f64> = (0..dv).map(|j| h1[j] * r2 * vec_at(Tensor::RmsGainFfn, j)).collect();
    let mut g = vec![0.0; hid];
    for j in 0..hid {
        let mut u = vec_at(Tensor::B1, j);
        for i in 0..dv {
            u += z2[i] * at(Tensor::W1, i, j, hid);
        }
        let inner = (2.0 / std::f64::consts::PI).sqrt() * (u + 0.044715 * u.powi(3));
        g[j] = 0.5 * u * (1.0 + inner.tanh());
    }
    let mut h2 = h1.clone();
    for j in 0..dv {
        h2[j] += vec_at(Tensor::B2, j);
        for i in 0..hid {
            h2[j] += g[i] * at(Tensor::W2, i, j, dv);
        }
    }
    let mut y = vec_at(Tensor::HeadB, voxel);
    for j in 0..dv {
        y += at(Tensor::HeadW, voxel, j, dv) * h2[j];
    }
    y
}

#[test]
fn forward_matches_scalar_reference() {
    let c = cfg(5, 4, 2, 3);
    let p = perturbed(&c, 1);
    let x = random_tokens(3, 5, 2);
    let cache = forward(&p, x.view(), &[0, 1, 2, 1]).unwrap();
    for (i, &v) in [0usize, 1, 2, 1].iter().enumerate() {
        let want = reference_forward(&p, &x, v);
        assert!((cache.predictions()[i] - want).abs() < 1e-12, "voxel {v}");
    }
}

#[test]
fn single_token_gets_all_attention() {
    let c = cfg(5, 8, 4, 2);
    let p = perturbed(&c, 3);
    let cache = forward(&p, random_tokens(1, 5, 4).view(), &[0, 1]).unwrap();
    for h in 0..4 {
        assert!(cache.attention(h).iter().all(|&w| w == 1.0));
    }
}

#[test]
fn token_order_is_irrelevant() {
    let c = cfg(6, 8, 2, 4);
    let p = perturbed(&c, 5);
    let x = random_tokens(7, 6, 6);
    let mut perm: Vec<usize> = (0..7).collect();
    perm.reverse();
    perm.swap(1, 4);
    let xp = x.select(Axis(0), &perm);
    let voxels = [0, 1, 2, 3];
    let a = p.predict(x.view(), &voxels).unwrap();
    let b = p.predict(xp.view(), &voxels).unwrap();
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() <= 1e-12);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let c = cfg(5, 4, 2, 3);
    let p = perturbed(&c, 7);
    let cache = forward(&p, random_tokens(4, 5, 8).view(), &[0, 2]).unwrap();
    let (g, dx) = backward(&p, &cache, Array1::zeros(2).view()).unwrap();
    assert!(g.as_slice().iter().all(|&v| v == 0.0));
    assert!(dx.iter().all(|&v| v == 0.0));
}

#[test]
fn stale_cache_is_rejected() {
    let c = cfg(5, 4, 2, 3);
    let mut p = perturbed(&c, 7);
    let cache = forward(&p, random_tokens(4, 5, 8).view(), &[0]).unwrap();
    p.tensor_mut(Tensor::WQ)[0] += 1.0;
    assert!(matches!(
        backward(&p, &cache, Array1::ones(1).view()),
        Err(Error::StaleCache(_))
    ));
}

#[test]
fn shape_and_range_errors() {
    let c = cfg(5, 4, 2, 3);
    let p = perturbed(&c, 7);
    assert!(matches!(
        forward(&p, random_tokens(4, 6, 0).view(), &[0]),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        forward(&p, random_tokens(4, 5, 0).view(), &[3]),
        Err(Error::OutOfRange(_))
    ));
    let mut bad = random_tokens(4, 5, 0);
    bad[(1, 1)] = f64::NAN;
    assert!(matches!(forward(&p, bad.view(), &[0]), Err(Error::NonFinite(_))));
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Loss `Σ_i dy_i ŷ_i` for a fixed random `dy`.
fn weighted_output(p: &EncoderParams, x: &Array2<f64>, voxels: &[usize], dy: &Array1<f64>) -> f64 {
    p.predict(x.view(), voxels).unwrap().dot(dy)
}

fn gradient_check(c: EncoderConfig, seed: u64) {
    let h = 1e-5;
    let mut p = perturbed(&c, seed);
    let x = random_tokens(5, c.token_dim, seed + 100);
    let voxels: Vec<usize> = (0..c.n_voxels).chain([0]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
    let dy: Array1<f64> = (0..voxels.len()).map(|_| rng.sample(StandardNormal)).collect();
    let cache = forward(&p, x.view(), &voxels).unwrap();
    let (grads, dx) = backward(&p, &cache, dy.view()).unwrap();

    for t in Tensor::ALL {
        let r = p.range(t);
        for idx in r.clone() {
            let orig = p.as_slice()[idx];
            p.as_mut_slice()[idx] = orig + h;
            let up = weighted_output(&p, &x, &voxels, &dy);
            p.as_mut_slice()[idx] = orig - h;
            let down = weighted_output(&p, &x, &voxels, &dy);
            p.as_mut_slice()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let e = rel_err(grads.as_slice()[idx], fd);
            assert!(e <= 1e-5, "{} [{}]: analytic {} fd {fd}", t.name(), idx - r.start, grads.as_slice()[idx]);
        }
    }
    let mut xp = x.clone();
    for i in 0..x.nrows() {
        for j in 0..x.ncols() {
            let orig = x[(i, j)];
            xp[(i, j)] = orig + h;
            let up = weighted_output(&p, &xp, &voxels, &dy);
            xp[(i, j)] = orig - h;
            let down = weighted_output(&p, &xp, &voxels, &dy);
            xp[(i, j)] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!(rel_err(dx[(i, j)], fd) <= 1e-5, "token ({i},{j})");
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    gradient_check(cfg(5, 4, 2, 3), 11);
    gradient_check(cfg(3, 6, 3, 2), 12);
    gradient_check(cfg(7, 8, 1, 2), 13);
}

#[test]
fn accumulated_gradients_add_up() {
    let c = cfg(5, 4, 2, 3);
    let p = perturbed(&c, 21);
    let x1 = random_tokens(4, 5, 22);
    let x2 = random_tokens(6, 5, 23);
    let dy = Array1::from(vec![0.5, -1.5]);
    let c1 = forward(&p, x1.view(), &[0, 2]).unwrap();
    let c2 = forward(&p, x2.view(), &[0, 2]).unwrap();
    let (g1, _) = backward(&p, &c1, dy.view()).unwrap();
    let (g2, _) = backward(&p, &c2, dy.view()).unwrap();
    let mut acc = p.zeros_like();
    backward_accumulate(&p, &c1, dy.view(), &mut acc, false).unwrap();
    backward_accumulate(&p, &c2, dy.view(), &mut acc, false).unwrap();
    for i in 0..acc.len() {
        assert!((acc.as_slice()[i] - g1.as_slice()[i] - g2.as_slice()[i]).abs() < 1e-14);
    }
}

#[test]
fn fast_ig_matches_generic_riemann_sum() {
    let c = cfg(6, 8, 2, 4);
    let p = perturbed(&c, 31);
    let x = random_tokens(5, 6, 32);
    let mean = x.mean_axis(Axis(0)).unwrap();
    let mut base = Array2::zeros(x.raw_dim());
    for mut r in base.rows_mut() {
        r.assign(&mean);
    }
    for m in [1, 3, 10] {
        let fast = p.integrated_gradients(x.view(), base.view(), &[0, 1, 3], m).unwrap();
        let slow = riemann_ig(&p, x.view(), base.view(), &[0, 1, 3], m).unwrap();
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() < 1e-10, "m={m}: {a} vs {b}");
        }
    }
}

#[test]
fn lrh_two_factor_attention_output() {
    // orthonormal dictionary, noiseless tokens: (g·x·E⁻¹)·(E·W_V) = g·x·W_V
    let dict = FeatureDictionary::build(8, 8, 4, true).unwrap();
    let c = cfg(8, 8, 2, 2);
    let p = perturbed(&c, 41);
    let rows = [3usize, 3, 5, 0, 7];
    let mut x = Array2::zeros((5, 8));
    for (j, &f) in rows.iter().enumerate() {
        x.row_mut(j).assign(&dict.direction(f));
    }
    let cache = forward(&p, x.view(), &[0, 1]).unwrap();
    let e = dict.directions();
    let e_inv = e.t();
    let w_v = Array2::from_shape_vec((8, 8), p.tensor(Tensor::WV).to_vec()).unwrap();
    let dh = c.head_dim();
    for h in 0..c.n_heads {
        let g = cache.attention(h);
        let direct = g.dot(&x).dot(&w_v);
        let factored = g.dot(&x).dot(&e_inv).dot(&e.dot(&w_v));
        for i in 0..2 {
            for j in h * dh..(h + 1) * dh {
                assert!((direct[(i, j)] - factored[(i, j)]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn key_init_scale_matches_fan_in() {
    let c = EncoderConfig {
        token_dim: 1000,
        model_dim: 1000,
        n_heads: 10,
        ffn_expansion: 1,
        n_voxels: 1,
        rms_epsilon: 1e-6,
    };
    let p = EncoderParams::init(&c, 99).unwrap();
    let w = p.tensor(Tensor::WK);
    assert_eq!(w.len(), 1_000_000);
    let mean = w.iter().sum::<f64>() / w.len() as f64;
    let sd = (w.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
    let want = 1.0 / 1000f64.sqrt();
    assert!((sd / want - 1.0).abs() < 0.02, "sd {sd} vs {want}");
}

#[test]
fn mse_hand_cases() {
    let (l, g) = mse_loss(Array1::from(vec![1.0, 0.0]).view(), Array1::zeros(2).view()).unwrap();
    assert_eq!(l, 0.5);
    assert_eq!(g.to_vec(), vec![1.0, 0.0]);
    let y = Array1::from(vec![0.3, -2.0, 4.0]);
    let (l, g) = mse_loss(y.view(), y.view()).unwrap();
    assert_eq!(l, 0.0);
    assert!(g.iter().all(|&v| v == 0.0));
    assert!(matches!(
        mse_loss(Array1::zeros(0).view(), Array1::zeros(0).view()),
        Err(Error::Empty(_))
    ));
}

#[test]
fn mse_matches_naive_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p: Array1<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let t: Array1<f64> = (0..1000).map(|_| rng.sample(StandardNormal)).collect();
    let mut naive = 0.0;
    for i in 0..1000 {
        naive += (p[i] - t[i]) * (p[i] - t[i]);
    }
    naive /= 1000.0;
    let (l, g) = mse_loss(p.view(), t.view()).unwrap();
    assert!((l - naive).abs() < 1e-12);
    for i in 0..1000 {
        assert!((g[i] - 2.0 * (p[i] - t[i]) / 1000.0).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn attention_rows_are_distributions(seed in 0u64..1000, s in 1usize..9) {
        let c = cfg(4, 8, 4, 3);
        let p = perturbed(&c, seed);
        let x = random_tokens(s, 4, seed + 1) * 3.0;
        let cache = forward(&p, x.view(), &[0, 1, 2]).unwrap();
        for h in 0..4 {
            for row in cache.attention(h).rows() {
                prop_assert!((row.sum() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&w| (0.0..=1.0).contains(&w)));
            }
        }
    }
}
