//! Kernel priors: cluster teacher kernels in Wasserstein space, extract
//! PCA bases from the centroids, sample bases by significance and turn them
//! into fixed graft branches.

pub mod bank;
pub mod graft;
pub mod kmeans;
pub mod pca;

pub use bank::{
    load_kernel_bank, synthetic_teacher_bank, BankMetadata, KernelBank, KernelSlice, LayerInfo,
    Provenance,
};
pub use graft::{build_graft, GraftSpec};
pub use kmeans::{
    euclidean_kmeans, kernel_grid, kmeans, wasserstein_kmeans, Centroids, ClusterMetric,
    KMeansConfig,
};
pub use pca::{pca_centroids, sample_bases, BasisSet};

use crate::error::{Error, Result};
use crate::transport::SignedGridMeasure;

/// Signed measure on the kernel's cell centers (`x` = column, `y` = row).
pub fn kernel_to_measure(k: &KernelSlice) -> Result<SignedGridMeasure> {
    if k.is_zero() {
        return Err(Error::invalid("all-zero kernel has no measure"));
    }
    SignedGridMeasure::from_values(&kernel_grid(k.k), &k.values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positive_kernel_has_no_negative_part() {
        let k = KernelSlice::new(vec![0.1, 0.0, 0.2, 0.0, 0.4, 0.0, 0.1, 0.0, 0.2], 3).unwrap();
        let m = kernel_to_measure(&k).unwrap();
        assert!(m.negative.is_none());
        assert!((m.pos_mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn negation_swaps_parts() {
        let v = vec![0.3, -0.1, 0.0, 0.5, -0.7, 0.2, 0.0, 0.0, -0.4];
        let a = kernel_to_measure(&KernelSlice::new(v.clone(), 3).unwrap()).unwrap();
        let b =
            kernel_to_measure(&KernelSlice::new(v.iter().map(|x| -x).collect(), 3).unwrap())
                .unwrap();
        assert_eq!(a.positive, b.negative);
        assert_eq!(a.negative, b.positive);
        assert_eq!(a.pos_mass, b.neg_mass);
    }

    #[test]
    fn recombination_reconstructs_kernel() {
        let v = vec![0.3, -0.1, 0.0, 0.5, -0.7, 0.2, 0.0, 0.01, -0.4];
        let m = kernel_to_measure(&KernelSlice::new(v.clone(), 3).unwrap()).unwrap();
        let back = m.values_on(&kernel_grid(3));
        for (a, b) in back.iter().zip(&v) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn zero_kernel_is_rejected() {
        let k = KernelSlice::new(vec![0.0; 9], 3).unwrap();
        assert!(kernel_to_measure(&k).is_err());
    }
}
