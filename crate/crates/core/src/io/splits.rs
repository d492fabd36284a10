use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Disjoint image-id lists.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: Vec<u32>,
    pub val: Vec<u32>,
    pub test: Vec<u32>,
    pub analysis: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub analysis: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.65,
            val: 0.1,
            test: 0.05,
            analysis: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64, analysis: f64) -> Self {
        Self {
            train,
            val,
            test,
            analysis,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self, dataset_ids: &[u32]) -> Result<()> {
        let all: HashSet<u32> = dataset_ids.iter().copied().collect();
        let mut seen = HashSet::new();
        for (name, ids) in self.named() {
            for id in ids {
                if !all.contains(id) {
                    return Err(Error::Config(format!(
                        "split `{name}` references unknown image {id}"
                    )));
                }
                if !seen.insert(*id) {
                    return Err(Error::Config(format!("image {id} appears in two splits")));
                }
            }
        }
        Ok(())
    }

    pub fn named(&self) -> [(&'static str, &Vec<u32>); 4] {
        [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
            ("analysis", &self.analysis),
        ]
    }

    pub fn get(&self, name: &str) -> Option<&[u32]> {
        self.named()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| v.as_slice())
    }
}

/// Deterministic shuffle by `seed`, then consecutive chunks of sizes
/// `round(fraction · n)` in train/val/test/analysis order.
pub fn make_splits(image_ids: &[u32], fractions: SplitFractions, seed: u64) -> Result<SplitSpec> {
    if image_ids.is_empty() {
        return Err(Error::Empty("no images to split".into()));
    }
    let f = [fractions.train, fractions.val, fractions.test, fractions.analysis];
    if f.iter().any(|v| !(*v >= 0.0)) || f.iter().sum::<f64>() > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions {f:?} must be non-negative and sum to ≤ 1"
        )));
    }
    let n = image_ids.len();
    let mut sizes: Vec<usize> = f.iter().map(|v| (v * n as f64).round() as usize).collect();
    while sizes.iter().sum::<usize>() > n {
        let i = (0..4).max_by_key(|&i| (sizes[i], std::cmp::Reverse(i))).expect("four");
        sizes[i] -= 1;
    }
    let mut ids = image_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = ids.into_iter();
    let mut take = |k: usize| it.by_ref().take(k).collect::<Vec<_>>();
    Ok(SplitSpec {
        train: take(sizes[0]),
        val: take(sizes[1]),
        test: take(sizes[2]),
        analysis: take(sizes[3]),
    })
}
