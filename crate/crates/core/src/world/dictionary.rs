use ndarray::{Array2, ArrayView1};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// The feature set with one unit-norm direction per feature (rows of `E_F`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDictionary {
    directions: Array2<f64>,
    names: Vec<String>,
    orthonormalized: bool,
}

impl FeatureDictionary {
    /// Gaussian directions normalized to unit length; optionally
    /// orthonormalized by two passes of modified Gram–Schmidt.
    pub fn build(
        n_features: usize,
        token_dim: usize,
        seed: u64,
        orthonormalize: bool,
    ) -> Result<Self> {
        if n_features == 0 || token_dim == 0 {
            return Err(Error::Dimension(
                "dictionary needs n_features ≥ 1 and token_dim ≥ 1".into(),
            ));
        }
        if orthonormalize && n_features > token_dim {
            return Err(Error::Dimension(format!(
                "cannot orthonormalize {n_features} directions in {token_dim} dimensions"
            )));
        }
        let mut rng = seed::rng_for(seed, &[seed::DICTIONARY]);
        let mut directions = Array2::from_shape_fn((n_features, token_dim), |_| {
            StandardNormal.sample(&mut rng)
        });
        if orthonormalize {
            for _ in 0..2 {
                for i in 0..n_features {
                    for j in 0..i {
                        let proj: f64 = directions.row(i).dot(&directions.row(j));
                        let prev = directions.row(j).to_owned();
                        directions.row_mut(i).scaled_add(-proj, &prev);
                    }
                    normalize_row(&mut directions, i)?;
                }
            }
        } else {
            for i in 0..n_features {
                normalize_row(&mut directions, i)?;
            }
        }
        let names = (0..n_features).map(|i| format!("feat{i:03}")).collect();
        Ok(Self {
            directions,
            names,
            orthonormalized: orthonormalize,
        })
    }

    /// Wraps externally supplied directions; rows are normalized to unit length.
    pub fn from_directions(mut directions: Array2<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != directions.nrows() {
            return Err(Error::Shape(format!(
                "{} names for {} directions",
                names.len(),
                directions.nrows()
            )));
        }
        let mut sorted = names.clone();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Config("feature names must be unique".into()));
        }
        for i in 0..directions.nrows() {
            normalize_row(&mut directions, i)?;
        }
        let gram = directions.dot(&directions.t());
        let orthonormalized = (0..gram.nrows())
            .all(|i| (0..gram.ncols()).all(|j| i == j || gram[(i, j)].abs() < 1e-9));
        Ok(Self {
            directions,
            names,
            orthonormalized,
        })
    }

    pub fn n_features(&self) -> usize {
        self.directions.nrows()
    }

    pub fn token_dim(&self) -> usize {
        self.directions.ncols()
    }

    pub fn directions(&self) -> &Array2<f64> {
        &self.directions
    }

    pub fn direction(&self, feature: usize) -> ArrayView1<'_, f64> {
        self.directions.row(feature)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn is_orthonormal(&self) -> bool {
        self.orthonormalized
    }

    /// Largest absolute cosine between distinct rows.
    pub fn max_abs_coherence(&self) -> f64 {
        let gram = self.directions.dot(&self.directions.t());
        let n = gram.nrows();
        let mut best: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                best = best.max(gram[(i, j)].abs());
            }
        }
        best
    }
}

fn normalize_row(m: &mut Array2<f64>, i: usize) -> Result<()> {
    let norm = m.row(i).dot(&m.row(i)).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Dimension(format!("direction {i} has zero or non-finite norm")));
    }
    m.row_mut(i).mapv_inplace(|v| v / norm);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthonormal_square_basis() {
        let d = FeatureDictionary::build(8, 8, 1, true).unwrap();
        let gram = d.directions().dot(&d.directions().t());
        for i in 0..8 {
            for j in 0..8 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((gram[(i, j)] - want).abs() < 1e-9);
            }
        }
        assert!(d.is_orthonormal());
    }

    #[test]
    fn rejects_overcomplete_orthonormalization() {
        assert!(matches!(
            FeatureDictionary::build(9, 8, 1, true),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn rows_are_unit_norm_and_deterministic() {
        let a = FeatureDictionary::build(20, 7, 5, false).unwrap();
        let b = FeatureDictionary::build(20, 7, 5, false).unwrap();
        assert_eq!(a, b);
        for i in 0..20 {
            let n = a.direction(i).dot(&a.direction(i)).sqrt();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn accepts_wide_tokens() {
        let d = FeatureDictionary::build(16, 4096, 2, true).unwrap();
        assert_eq!(d.token_dim(), 4096);
        assert!(d.max_abs_coherence() < 1e-9);
    }

    #[test]
    fn names_are_unique() {
        let d = FeatureDictionary::build(64, 64, 3, true).unwrap();
        let mut n = d.names().to_vec();
        n.sort();
        n.dedup();
        assert_eq!(n.len(), 64);
        let dup = FeatureDictionary::from_directions(
            d.directions().clone().slice_move(ndarray::s![0..2, ..]),
            vec!["a".into(), "a".into()],
        );
        assert!(dup.is_err());
    }
}
