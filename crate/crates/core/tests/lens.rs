use std::collections::BTreeMap;

use mine_core::attribution::Selection;
use mine_core::lens::{
    aggregate_bag, decode_critical_features, decode_selection, logit_lens, recovery_score,
    CriticalFeatureSet, DecodeConfig, VocabularyProjector, WordBag,
};
use mine_core::world::{render_stimulus, FeatureDictionary, StimulusSpec, World, WorldConfig};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn gaussian(shape: (usize, usize), seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

fn labels(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("w{i}")).collect()
}

#[test]
fn fifty_tokens_give_five_hundred_words() {
    let dict = FeatureDictionary::build(64, 64, 2, true).unwrap();
    let p = VocabularyProjector::from_dictionary(&dict).unwrap();
    let x = gaussian((50, 64), 1);
    let bag = aggregate_bag(x.rows(), &p, 10).unwrap();
    assert_eq!(bag.total_count(), 500);
    assert!(bag.entries.iter().all(|e| e.count >= 1));
}

#[test]
fn bag_matches_nested_loop_oracle() {
    for seed in 0..20 {
        let w = gaussian((12, 20), 100 + seed);
        let p = VocabularyProjector::new(w.clone(), labels(20)).unwrap();
        let x = gaussian((9, 12), 200 + seed);
        let per_token = 1 + (seed as usize % 7);
        let bag = aggregate_bag(x.rows(), &p, per_token).unwrap();

        let mut oracle: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for t in 0..x.nrows() {
            let mut logits = Vec::new();
            for word in 0..20 {
                let mut l = 0.0;
                for d in 0..12 {
                    l += x[(t, d)] * w[(d, word)];
                }
                logits.push((word, l));
            }
            // selection sort for the top entries, ties to the lower index
            for _ in 0..per_token {
                let mut best = 0;
                for i in 1..logits.len() {
                    if logits[i].1 > logits[best].1 {
                        best = i;
                    }
                }
                let (word, l) = logits.remove(best);
                let e = oracle.entry(word).or_insert((0, 0.0));
                e.0 += 1;
                e.1 += l;
            }
        }
        assert_eq!(bag.entries.len(), oracle.len());
        for e in &bag.entries {
            let (c, s) = oracle[&e.word];
            assert_eq!(e.count, c);
            assert!((e.mean_logit - s / c as f64).abs() < 1e-12);
        }
        for pair in bag.entries.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            assert!(a.count > b.count || (a.count == b.count && a.mean_logit >= b.mean_logit));
        }
    }
}

/// `P(1 + z₀ > max_{j≥1} z_j)` for iid `z ~ N(0, σ²)` over `n` words, by
/// quadrature over `z₀`.
fn argmax_probability(sigma: f64, n: usize) -> f64 {
    let std = Normal::new(0.0, 1.0).unwrap();
    let (lo, hi, steps) = (-10.0, 10.0, 20_000);
    let h = (hi - lo) / steps as f64;
    (0..=steps)
        .map(|i| {
            let u = lo + i as f64 * h;
            let w = if i == 0 || i == steps { 0.5 } else { 1.0 };
            w * std.pdf(u) * std.cdf((1.0 + sigma * u) / sigma).powi(n as i32 - 1)
        })
        .sum::<f64>()
        * h
}

#[test]
fn noisy_top1_recovery_matches_gaussian_argmax() {
    let dict = FeatureDictionary::build(64, 64, 5, true).unwrap();
    let p = VocabularyProjector::from_dictionary(&dict).unwrap();
    for sigma in [0.1, 0.5] {
        let mut hits = 0usize;
        let mut total = 0usize;
        for rep in 0..100u64 {
            let f = (rep % 64) as usize;
            let spec = StimulusSpec {
                image_id: rep as u32,
                feature_set: vec![f],
                assignment: vec![Some(f); 1000],
            };
            let t = render_stimulus(&spec, &dict, sigma, 1000 + rep).unwrap();
            for row in t.values.rows() {
                total += 1;
                if logit_lens(row, &p, 1).unwrap()[0].0 == f {
                    hits += 1;
                }
            }
        }
        let rate = hits as f64 / total as f64;
        let oracle = argmax_probability(sigma, 64);
        assert!((rate - oracle).abs() <= 0.01, "σ={sigma}: {rate} vs {oracle}");
    }
}

#[test]
fn noiseless_feature_tokens_decode_to_the_feature() {
    let c = WorldConfig::default().noiseless();
    let world = World::generate(&WorldConfig { n_images: 50, ..c }).unwrap();
    let p = VocabularyProjector::from_dictionary(&world.dictionary).unwrap();
    let cfg = DecodeConfig::default();
    for (i, stim) in world.stimuli.iter().enumerate() {
        let x = world.render(i).unwrap().values;
        for &f in &stim.feature_set {
            let rows = stim.positions_of(f);
            let bag = aggregate_bag(rows.iter().map(|&j| x.row(j)), &p, cfg.words_per_token).unwrap();
            let d = decode_critical_features(&bag, cfg.resolved_n_out(3), cfg.min_relative_logit).unwrap();
            assert_eq!(d, vec![f]);
        }
    }
}

#[test]
fn relative_floor_drops_weak_words() {
    let bag = WordBag {
        entries: vec![
            entry(4, 3, 1.0),
            entry(9, 3, 0.2),
            entry(1, 1, 0.6),
            entry(2, 1, 0.4),
        ],
    };
    assert_eq!(decode_critical_features(&bag, 4, 0.5).unwrap(), vec![4, 1]);
    assert_eq!(decode_critical_features(&bag, 4, 0.0).unwrap(), vec![4, 9, 1, 2]);
    assert_eq!(decode_critical_features(&bag, 1, 0.0).unwrap(), vec![4]);
}

fn entry(word: usize, count: usize, mean_logit: f64) -> mine_core::lens::BagEntry {
    mine_core::lens::BagEntry {
        word,
        label: format!("w{word}"),
        count,
        mean_logit,
    }
}

#[test]
fn recovery_of_planted_and_disjoint_sets() {
    let world = World::generate(&WorldConfig {
        n_images: 200,
        ..WorldConfig::default().noiseless()
    })
    .unwrap();
    let mut exact = Vec::new();
    let mut wrong = Vec::new();
    for v in 0..20 {
        let voxel = &world.voxels[v];
        for stim in world.stimuli.iter().filter(|s| voxel.detects(s)) {
            let planted = voxel.present_critical(stim);
            let other: Vec<usize> = (0..64).filter(|f| !voxel.critical_set.contains(f)).take(2).collect();
            for (out, features) in [(&mut exact, planted), (&mut wrong, other)] {
                out.push(CriticalFeatureSet {
                    voxel_id: v as u32,
                    image_id: stim.image_id,
                    source: Selection::TopIg,
                    features,
                    bag: WordBag::default(),
                });
            }
        }
    }
    for s in recovery_score(&exact, Some(&world)).unwrap() {
        assert_eq!((s.precision, s.recall), (1.0, 1.0));
        assert_eq!(s.n_without_target, 0);
    }
    for s in recovery_score(&wrong, Some(&world)).unwrap() {
        assert_eq!((s.precision, s.recall), (0.0, 0.0));
    }
}

#[test]
fn decode_selection_picks_the_highest_scoring_tokens() {
    let dict = FeatureDictionary::build(8, 8, 1, true).unwrap();
    let p = VocabularyProjector::from_dictionary(&dict).unwrap();
    let assignment = vec![Some(2), Some(5), Some(5), None, Some(2)];
    let spec = StimulusSpec {
        image_id: 7,
        feature_set: vec![2, 5],
        assignment,
    };
    let x = render_stimulus(&spec, &dict, 0.0, 0).unwrap().values;
    let scores = [0.1, 0.9, 0.8, 0.0, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = DecodeConfig {
        words_per_token: 4,
        ..Default::default()
    };
    let top = decode_selection(3, 7, x.view(), &scores, 2, Selection::TopIg, &p, &cfg, 4, &mut rng).unwrap();
    assert_eq!(top.features, vec![5]);
    let low = decode_selection(3, 7, x.view(), &scores, 2, Selection::LowestIg, &p, &cfg, 4, &mut rng).unwrap();
    // the background token decodes to nothing above the floor
    assert_eq!(low.features, vec![2]);
}

#[test]
fn bags_are_reproducible() {
    let dict = FeatureDictionary::build(16, 16, 2, true).unwrap();
    let p = VocabularyProjector::from_dictionary(&dict).unwrap();
    let x = gaussian((10, 16), 3);
    let a = aggregate_bag(x.rows(), &p, 5).unwrap();
    let b = aggregate_bag(x.rows(), &p, 5).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn logit_lens_is_linear(seed in 0u64..300, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let w = gaussian((6, 9), seed);
        let p = VocabularyProjector::new(w, labels(9)).unwrap();
        let t = gaussian((2, 6), seed + 1000);
        let mix: Array1<f64> = &t.row(0) * a + &t.row(1) * b;
        let lhs = p.logits(mix.view()).unwrap();
        let rhs = p.logits(t.row(0)).unwrap() * a + p.logits(t.row(1)).unwrap() * b;
        for (x, y) in lhs.iter().zip(rhs.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
