//! Discrete optimal transport with squared-Euclidean ground cost.
//!
//! Distances are exact (transportation simplex, see [`simplex`]); barycenters
//! use log-domain iterative Bregman projections with an annealed entropic
//! regulariser (see [`barycenter`]). [`SignedGridMeasure`] carries convolution
//! kernels, which have negative entries, into this setting.

pub mod barycenter;
pub mod demo;
pub mod simplex;

pub use barycenter::{barycenter, BarycenterConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A support point. One-dimensional measures use `[x, 0.0]`.
pub type Point = [f64; 2];

pub const MASS_TOL: f64 = 1e-9;

#[inline]
pub fn sq_dist(a: &Point, b: &Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

/// A probability measure on finitely many distinct points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMeasure {
    support: Vec<Point>,
    mass: Vec<f64>,
}

impl GridMeasure {
    pub fn new(support: Vec<Point>, mass: Vec<f64>) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("measure has empty support"));
        }
        if support.len() != mass.len() {
            return Err(Error::shape(format!(
                "{} support points but {} masses",
                support.len(),
                mass.len()
            )));
        }
        if mass.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::invalid("masses must be finite and nonnegative"));
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_TOL {
            return Err(Error::invalid(format!(
                "measure is not normalized: total mass {total}"
            )));
        }
        let mut sorted: Vec<&Point> = support.iter().collect();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("support points must be distinct"));
        }
        Ok(GridMeasure { support, mass })
    }

    /// Normalizes nonnegative weights into a measure.
    pub fn from_weights(support: Vec<Point>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::invalid("weights must have positive finite total"));
        }
        GridMeasure::new(support, weights.into_iter().map(|w| w / total).collect())
    }

    pub fn dirac(p: Point) -> Self {
        GridMeasure {
            support: vec![p],
            mass: vec![1.0],
        }
    }

    pub fn support(&self) -> &[Point] {
        &self.support
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn len(&self) -> usize {
        self.mass.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mass.is_empty()
    }

    /// Total variation distance `0.5 * sum |a - b|` on a shared support.
    pub fn total_variation(&self, other: &GridMeasure) -> Result<f64> {
        if self.support != other.support {
            return Err(Error::shape("total variation needs a shared support"));
        }
        Ok(0.5 * self.mass.iter().zip(&other.mass).map(|(a, b)| (a - b).abs()).sum::<f64>())
    }
}

/// Coupling matrix `n_a x n_b` (row-major) and its transport cost.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub rows: usize,
    pub cols: usize,
    pub coupling: Vec<f64>,
    pub cost: f64,
}

impl TransportPlan {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.coupling[i * self.cols + j]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.coupling.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.coupling.chunks(self.cols) {
            for (acc, v) in s.iter_mut().zip(r) {
                *acc += v;
            }
        }
        s
    }
}

/// Optimal coupling under `c(x, y) = |x - y|^2`; `cost` is `W2^2`.
pub fn solve_ot_plan(a: &GridMeasure, b: &GridMeasure) -> Result<TransportPlan> {
    let cost: Vec<f64> = a
        .support
        .iter()
        .flat_map(|x| b.support.iter().map(move |y| sq_dist(x, y)))
        .collect();
    simplex::solve(&a.mass, &b.mass, &cost)
}

/// Squared 2-Wasserstein distance.
pub fn w2_squared(a: &GridMeasure, b: &GridMeasure) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    Ok(solve_ot_plan(a, b)?.cost)
}

/// Pointwise weighted average of mass vectors on a shared support.
pub fn euclidean_mean(measures: &[GridMeasure], weights: &[f64]) -> Result<GridMeasure> {
    check_weights(measures.len(), weights)?;
    let support = measures[0].support.clone();
    let mut mass = vec![0.0; support.len()];
    for (m, &w) in measures.iter().zip(weights) {
        if m.support != support {
            return Err(Error::shape("euclidean mean needs a shared support"));
        }
        for (acc, v) in mass.iter_mut().zip(&m.mass) {
            *acc += w * v;
        }
    }
    let total: f64 = mass.iter().sum();
    mass.iter_mut().for_each(|v| *v /= total);
    GridMeasure::new(support, mass)
}

pub(crate) fn check_weights(count: usize, weights: &[f64]) -> Result<()> {
    if count == 0 {
        return Err(Error::invalid("need at least one measure"));
    }
    if weights.len() != count {
        return Err(Error::shape(format!(
            "{count} measures but {} weights",
            weights.len()
        )));
    }
    if weights.iter().any(|&w| !(w >= 0.0)) {
        return Err(Error::invalid("weights must be nonnegative"));
    }
    let s: f64 = weights.iter().sum();
    if (s - 1.0).abs() > MASS_TOL {
        return Err(Error::invalid(format!("weights sum to {s}, expected 1")));
    }
    Ok(())
}

/// A finite signed measure split into normalized positive and negative parts.
///
/// A part is `None` exactly when its mass is zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignedGridMeasure {
    pub positive: Option<GridMeasure>,
    pub negative: Option<GridMeasure>,
    pub pos_mass: f64,
    pub neg_mass: f64,
}

impl SignedGridMeasure {
    pub fn new(
        positive: Option<GridMeasure>,
        negative: Option<GridMeasure>,
        pos_mass: f64,
        neg_mass: f64,
    ) -> Result<Self> {
        if !(pos_mass >= 0.0 && neg_mass >= 0.0) {
            return Err(Error::invalid("part masses must be nonnegative"));
        }
        if positive.is_some() != (pos_mass > 0.0) || negative.is_some() != (neg_mass > 0.0) {
            return Err(Error::invalid(
                "a part must be present exactly when its mass is positive",
            ));
        }
        Ok(SignedGridMeasure {
            positive,
            negative,
            pos_mass,
            neg_mass,
        })
    }

    /// Splits signed values on `support` into normalized parts.
    pub fn from_values(support: &[Point], values: &[f64]) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::shape("support/value length mismatch"));
        }
        let part = |sign: f64| -> Result<(Option<GridMeasure>, f64)> {
            let (pts, w): (Vec<Point>, Vec<f64>) = support
                .iter()
                .zip(values)
                .filter(|(_, &v)| v * sign > 0.0)
                .map(|(p, &v)| (*p, v * sign))
                .unzip();
            let m: f64 = w.iter().sum();
            if m > 0.0 {
                Ok((Some(GridMeasure::from_weights(pts, w)?), m))
            } else {
                Ok((None, 0.0))
            }
        };
        let (positive, pos_mass) = part(1.0)?;
        let (negative, neg_mass) = part(-1.0)?;
        SignedGridMeasure::new(positive, negative, pos_mass, neg_mass)
    }

    pub fn is_zero(&self) -> bool {
        self.positive.is_none() && self.negative.is_none()
    }

    /// Recombines `pos_mass * positive - neg_mass * negative` on `support`.
    pub fn values_on(&self, support: &[Point]) -> Vec<f64> {
        let mut out = vec![0.0; support.len()];
        let mut add = |m: &GridMeasure, scale: f64| {
            for (p, v) in m.support.iter().zip(&m.mass) {
                if let Some(i) = support.iter().position(|q| q == p) {
                    out[i] += scale * v;
                }
            }
        };
        if let Some(p) = &self.positive {
            add(p, self.pos_mass);
        }
        if let Some(n) = &self.negative {
            add(n, -self.neg_mass);
        }
        out
    }
}

/// Distance between signed measures:
///
/// `w_pos * W2^2(P_a, P_b) + w_neg * W2^2(N_a, N_b)
///  + mass_penalty * ((p_a - p_b)^2 + (n_a - n_b)^2)`
///
/// with `w_pos = (p_a + p_b) / 2`, `w_neg = (n_a + n_b) / 2`. When one side
/// of a part is empty the transport term for that part is dropped and only
/// the mass penalty remains.
pub fn signed_w2(a: &SignedGridMeasure, b: &SignedGridMeasure, mass_penalty: f64) -> Result<f64> {
    if a.is_zero() || b.is_zero() {
        return Err(Error::invalid("signed measure with both parts empty"));
    }
    let mut d = 0.0;
    if let (Some(pa), Some(pb)) = (&a.positive, &b.positive) {
        d += 0.5 * (a.pos_mass + b.pos_mass) * w2_squared(pa, pb)?;
    }
    if let (Some(na), Some(nb)) = (&a.negative, &b.negative) {
        d += 0.5 * (a.neg_mass + b.neg_mass) * w2_squared(na, nb)?;
    }
    let dp = a.pos_mass - b.pos_mass;
    let dn = a.neg_mass - b.neg_mass;
    Ok(d + mass_penalty * (dp * dp + dn * dn))
}
