//! Graft branches: a trainable 1x1 mixer followed by a frozen 3x3 conv whose
//! kernels are sampled PCA bases.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernel_prior::pca::{sample_bases, BasisSet};
use crate::ops::{conv2d_with, pad_zero, Padding};
use crate::reparam::merge_sequential;
use crate::tensor::{ConvParams, Real, Tensor4};

#[derive(Debug, Clone, PartialEq)]
pub struct GraftSpec<T> {
    /// `sampled_indices[o][d]`: basis placed at `fixed_3x3.weight[o, d]`.
    pub sampled_indices: Vec<Vec<usize>>,
    /// `C_out x D x 3 x 3`, frozen, zero bias.
    pub fixed_3x3: ConvParams<T>,
    /// `D x C_in x 1 x 1`, trainable.
    pub mix_1x1: ConvParams<T>,
}

impl<T: Real> GraftSpec<T> {
    pub fn inner_width(&self) -> usize {
        self.mix_1x1.c_out()
    }

    pub fn c_in(&self) -> usize {
        self.mix_1x1.c_in()
    }

    pub fn c_out(&self) -> usize {
        self.fixed_3x3.c_out()
    }

    pub fn validate(&self) -> Result<()> {
        self.fixed_3x3.validate()?;
        self.mix_1x1.validate()?;
        if self.fixed_3x3.kernel_size() != 3 || self.mix_1x1.kernel_size() != 1 {
            return Err(Error::shape("graft needs a 1x1 mixer and a 3x3 fixed conv"));
        }
        if self.fixed_3x3.c_in() != self.mix_1x1.c_out() {
            return Err(Error::shape(format!(
                "graft inner width mismatch: {} vs {}",
                self.fixed_3x3.c_in(),
                self.mix_1x1.c_out()
            )));
        }
        if self.fixed_3x3.trainable {
            return Err(Error::invalid("graft 3x3 kernels must be frozen"));
        }
        Ok(())
    }

    /// Branch output: zero-pad the input, mix channels, then a valid 3x3
    /// conv. Padding first lets the mixer bias reach the border, which keeps
    /// the branch exactly mergeable into one same-padded 3x3 conv.
    pub fn forward(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mixed = conv2d_with(&pad_zero(x, 1), &self.mix_1x1, Padding::Same)?;
        conv2d_with(&mixed, &self.fixed_3x3, Padding::Valid)
    }

    pub fn cast<U: Real>(&self) -> GraftSpec<U> {
        GraftSpec {
            sampled_indices: self.sampled_indices.clone(),
            fixed_3x3: self.fixed_3x3.cast(),
            mix_1x1: self.mix_1x1.cast(),
        }
    }

    /// Largest relative least-squares residual of any merged `(o, i)` kernel
    /// against the span of the bases sampled for output channel `o`.
    pub fn span_residual(&self, basis: &BasisSet) -> Result<f64> {
        let merged = merge_sequential(&self.mix_1x1, &self.fixed_3x3)?;
        let kk = basis.k * basis.k;
        let mut worst: f64 = 0.0;
        for (o, idx) in self.sampled_indices.iter().enumerate() {
            let a = DMatrix::from_fn(kk, idx.len(), |r, d| basis.bases[idx[d]][r]);
            let svd = a.clone().svd(true, true);
            for i in 0..self.c_in() {
                let target = DVector::from_fn(kk, |r, _| {
                    merged.weight.get(o, i, r / basis.k, r % basis.k).as_f64()
                });
                let norm = target.norm();
                if norm == 0.0 {
                    continue;
                }
                let coef = svd
                    .solve(&target, 1e-12)
                    .map_err(|e| Error::invalid(format!("least squares: {e}")))?;
                let resid = (&a * coef - &target).norm() / norm;
                worst = worst.max(resid);
            }
        }
        Ok(worst)
    }
}

/// Gain of the mixer init relative to a He-uniform 3x3 conv.
pub const GRAFT_GAIN: f64 = 0.1;

/// Samples one basis per `(output channel, inner slot)` and builds the branch.
/// The mixer starts uniform in `±GRAFT_GAIN * sqrt(6 / C_in) / sqrt(D)` with
/// zero bias, so with unit-norm bases the merged kernels have the scale of a
/// He-uniform conv times `GRAFT_GAIN`.
pub fn build_graft<T: Real, R: Rng>(
    basis: &BasisSet,
    c_in: usize,
    c_out: usize,
    inner: usize,
    rng: &mut R,
) -> Result<GraftSpec<T>> {
    if inner == 0 || c_in == 0 || c_out == 0 {
        return Err(Error::shape("graft widths must be positive"));
    }
    if basis.k != 3 {
        return Err(Error::shape("graft bases must be 3x3"));
    }
    let flat = sample_bases(basis, c_out * inner, rng)?;
    let sampled_indices: Vec<Vec<usize>> = flat.chunks(inner).map(|c| c.to_vec()).collect();
    let weight = Tensor4::from_fn([c_out, inner, 3, 3], |o, d, y, x| {
        T::cast(basis.bases[sampled_indices[o][d]][y * 3 + x])
    });
    let fixed_3x3 = ConvParams::new(weight, vec![T::zero(); c_out], false)?;
    let bound = GRAFT_GAIN * (6.0 / c_in as f64).sqrt() / (inner as f64).sqrt();
    let mix = Tensor4::from_fn([inner, c_in, 1, 1], |_, _, _, _| {
        T::cast(rng.gen_range(-bound..bound))
    });
    let mix_1x1 = ConvParams::new(mix, vec![T::zero(); inner], true)?;
    let g = GraftSpec {
        sampled_indices,
        fixed_3x3,
        mix_1x1,
    };
    g.validate()?;
    Ok(g)
}
