//! Principal bases of the centroid matrix and significance sampling.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_prior::kmeans::Centroids;

/// Relative cutoff below which an eigenvalue is treated as zero.
pub const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub k: usize,
    /// Orthonormal eigenvectors of `C C^T`, each a flattened `k x k` kernel.
    pub bases: Vec<Vec<f64>>,
    /// Eigenvalues, descending.
    pub singulars: Vec<f64>,
    /// Sampling probabilities `sigma_i / sum_j sigma_j`.
    pub probs: Vec<f64>,
}

impl BasisSet {
    pub fn len(&self) -> usize {
        self.bases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bases.is_empty()
    }
}

/// Eigen-decomposition of `C C^T` where the columns of `C` are the flattened
/// centroids. No mean-centering.
pub fn pca_centroids(centroids: &Centroids) -> Result<BasisSet> {
    pca_matrix(&centroids.centers, centroids.k)
}

pub fn pca_matrix(columns: &[Vec<f64>], k: usize) -> Result<BasisSet> {
    let d = k * k;
    if columns.is_empty() {
        return Err(Error::invalid("no centroids"));
    }
    if columns.iter().any(|c| c.len() != d) {
        return Err(Error::shape(format!("centroids must have {d} values")));
    }
    let c = DMatrix::from_fn(d, columns.len(), |r, j| columns[j][r]);
    let gram = &c * c.transpose();
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let sigma_max = eig.eigenvalues[order[0]].max(0.0);
    if sigma_max == 0.0 {
        return Err(Error::invalid("centroid matrix is zero"));
    }
    let mut bases = Vec::new();
    let mut singulars = Vec::new();
    for &i in &order {
        let s = eig.eigenvalues[i];
        if s < RANK_TOL * sigma_max {
            break;
        }
        let mut u: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
        // Fix the sign so the largest-magnitude entry is positive.
        let pivot = u
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        if pivot < 0.0 {
            u.iter_mut().for_each(|v| *v = -*v);
        }
        bases.push(u);
        singulars.push(s);
    }
    let total: f64 = singulars.iter().sum();
    let probs = singulars.iter().map(|s| s / total).collect();
    Ok(BasisSet {
        k,
        bases,
        singulars,
        probs,
    })
}

/// `slots` i.i.d. basis indices drawn from `basis.probs`.
pub fn sample_bases<R: Rng>(basis: &BasisSet, slots: usize, rng: &mut R) -> Result<Vec<usize>> {
    if basis.is_empty() {
        return Err(Error::invalid("empty basis set"));
    }
    let dist = WeightedIndex::new(&basis.probs)
        .map_err(|e| Error::invalid(format!("basis probabilities: {e}")))?;
    Ok((0..slots).map(|_| dist.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_columns(m: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m)
            .map(|_| (0..9).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect()
    }

    #[test]
    fn rank_one_keeps_one_basis() {
        let col: Vec<f64> = (0..9).map(|i| i as f64 - 3.0).collect();
        let cols = vec![col.clone(), col.iter().map(|v| 2.0 * v).collect()];
        let b = pca_matrix(&cols, 3).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b.probs, vec![1.0]);
    }

    #[test]
    fn projection_reconstructs_centroids() {
        let cols = random_columns(12, 3);
        let b = pca_matrix(&cols, 3).unwrap();
        for c in &cols {
            let mut back = vec![0.0; 9];
            for u in &b.bases {
                let coef: f64 = u.iter().zip(c).map(|(a, b)| a * b).sum();
                for (r, v) in back.iter_mut().zip(u) {
                    *r += coef * v;
                }
            }
            for (a, b) in back.iter().zip(c) {
                assert!((a - b).abs() < 1e-6);
            }
        }
        let s: f64 = b.probs.iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(b.singulars.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn sampling_is_deterministic_and_single_basis_is_zero() {
        let b = pca_matrix(&random_columns(12, 4), 3).unwrap();
        let a1 = sample_bases(&b, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let a2 = sample_bases(&b, 50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a1, a2);
        let one = BasisSet {
            k: 3,
            bases: vec![vec![1.0; 9]],
            singulars: vec![1.0],
            probs: vec![1.0],
        };
        let idx = sample_bases(&one, 20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(idx.iter().all(|&i| i == 0));
    }

    #[test]
    fn empty_basis_errors() {
        let empty = BasisSet {
            k: 3,
            bases: vec![],
            singulars: vec![],
            probs: vec![],
        };
        assert!(sample_bases(&empty, 1, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
