//! One-dimensional barycenter demo: shifted unimodal densities averaged in
//! Wasserstein space keep their shape, while their Euclidean mean does not.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{barycenter, euclidean_mean, BarycenterConfig, GridMeasure, Point};

/// Support size of the demo lattice.
pub const DEMO_POINTS: usize = 256;
/// Number of input densities.
pub const DEMO_INPUTS: usize = 6;
/// Mass below which a local maximum is not counted as a mode.
pub const MODE_THRESHOLD: f64 = 1e-3;

/// `points` equally spaced positions on `[0, 1]`.
pub fn lattice(points: usize) -> Vec<Point> {
    let step = 1.0 / (points.max(2) - 1) as f64;
    (0..points).map(|i| [i as f64 * step, 0.0]).collect()
}

/// Discretized Gaussian on a 1-D lattice, normalized to unit mass.
pub fn gaussian_1d(support: &[Point], mean: f64, sd: f64) -> Result<GridMeasure> {
    if !(sd > 0.0) {
        return Err(Error::invalid("standard deviation must be positive"));
    }
    let w = support
        .iter()
        .map(|p| (-(p[0] - mean).powi(2) / (2.0 * sd * sd)).exp())
        .collect();
    GridMeasure::from_weights(support.to_vec(), w)
}

/// Strict local maxima (plateaus count once) with mass above `threshold`.
pub fn count_modes(mass: &[f64], threshold: f64) -> usize {
    let n = mass.len();
    let mut modes = 0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && mass[j + 1] == mass[i] {
            j += 1;
        }
        let left = i == 0 || mass[i - 1] < mass[i];
        let right = j + 1 == n || mass[j + 1] < mass[i];
        if left && right && mass[i] > threshold {
            modes += 1;
        }
        i = j + 1;
    }
    modes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demo1d {
    pub grid: Vec<f64>,
    pub inputs: Vec<Vec<f64>>,
    pub euclidean: Vec<f64>,
    pub barycenter: Vec<f64>,
}

impl Demo1d {
    /// CSV with columns `x, input0..inputN, euclidean, barycenter`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x");
        for i in 0..self.inputs.len() {
            s.push_str(&format!(",input{i}"));
        }
        s.push_str(",euclidean,barycenter\n");
        for (k, x) in self.grid.iter().enumerate() {
            s.push_str(&format!("{x:.6}"));
            for inp in &self.inputs {
                s.push_str(&format!(",{:.9e}", inp[k]));
            }
            s.push_str(&format!(",{:.9e},{:.9e}\n", self.euclidean[k], self.barycenter[k]));
        }
        s
    }
}

/// Barycenter solver settings used by the demo.
pub fn demo_config() -> BarycenterConfig {
    BarycenterConfig {
        eps_start: 1e-1,
        eps_end: 2e-4,
        stages: 6,
        max_iter: 20_000,
        tol: 1e-7,
    }
}

/// Uniform Euclidean and Wasserstein averages of Gaussians centred at
/// `centers` with a shared `sd` on a `points`-point lattice.
pub fn average_gaussians(
    centers: &[f64],
    sd: f64,
    points: usize,
    cfg: &BarycenterConfig,
) -> Result<Demo1d> {
    if centers.is_empty() {
        return Err(Error::invalid("no input densities"));
    }
    let support = lattice(points);
    let inputs: Vec<GridMeasure> = centers
        .iter()
        .map(|&c| gaussian_1d(&support, c, sd))
        .collect::<Result<_>>()?;
    let weights = vec![1.0 / inputs.len() as f64; inputs.len()];
    let euc = euclidean_mean(&inputs, &weights)?;
    let bary = barycenter(&inputs, &weights, &support, cfg)?;
    Ok(Demo1d {
        grid: support.iter().map(|p| p[0]).collect(),
        inputs: inputs.iter().map(|m| m.mass().to_vec()).collect(),
        euclidean: euc.mass().to_vec(),
        barycenter: bary.mass().to_vec(),
    })
}

/// Six equal-width unimodal densities spread over `[0.2, 0.8]`.
pub fn demo_barycenter_1d(points: usize) -> Result<Demo1d> {
    let centers: Vec<f64> = (0..DEMO_INPUTS)
        .map(|i| 0.2 + 0.6 * i as f64 / (DEMO_INPUTS - 1) as f64)
        .collect();
    average_gaussians(&centers, 0.03, points, &demo_config())
}
