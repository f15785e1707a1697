//! Lloyd clustering of kernel slices under a pluggable metric.
//!
//! With [`ClusterMetric::Wasserstein`] a slice is compared to a centroid with
//! [`signed_w2`] and a cluster's new centroid is the uniform-weight
//! barycenter of its members, computed separately for the positive and
//! negative parts. [`ClusterMetric::Euclidean`] uses squared Euclidean
//! distance and arithmetic means. Everything else is shared.
//!
//! A centroid update is kept only when it does not raise that cluster's
//! cost, so the recorded objective never increases even though the entropic
//! barycenter is approximate.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel_prior::bank::KernelBank;
use crate::kernel_prior::kernel_to_measure;
use crate::transport::{
    barycenter, signed_w2, BarycenterConfig, GridMeasure, Point, SignedGridMeasure,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClusterMetric {
    Wasserstein,
    Euclidean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub metric: ClusterMetric,
    /// Weight of the part-mass penalty inside [`signed_w2`].
    pub mass_penalty: f64,
    /// Solver settings for centroid updates. A non-converged solve leaves the
    /// centroid unchanged.
    pub barycenter: BarycenterConfig,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            clusters: 64,
            seed: 0,
            max_iter: 30,
            metric: ClusterMetric::Wasserstein,
            mass_penalty: 1.0,
            barycenter: BarycenterConfig {
                eps_end: 1e-2,
                stages: 3,
                max_iter: 20_000,
                tol: 1e-6,
                ..BarycenterConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Centroids {
    pub k: usize,
    /// Centroid kernels, `K*K` values each.
    pub centers: Vec<Vec<f64>>,
    /// Cluster of every bank slice; `None` for slices skipped as all-zero.
    pub assignment: Vec<Option<usize>>,
    /// Clustering objective after every assignment step.
    pub objective_history: Vec<f64>,
    /// Set when the bank has fewer distinct slices than requested clusters.
    pub degenerate: bool,
    pub metric: ClusterMetric,
}

impl Centroids {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn final_objective(&self) -> f64 {
        self.objective_history.last().copied().unwrap_or(0.0)
    }

    /// Member indices per cluster.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut parts = vec![Vec::new(); self.centers.len()];
        for (i, a) in self.assignment.iter().enumerate() {
            if let Some(c) = a {
                parts[*c].push(i);
            }
        }
        parts
    }
}

/// Cell-center coordinates `(x, y)` of a `k x k` kernel grid, row-major.
pub fn kernel_grid(k: usize) -> Vec<Point> {
    (0..k * k).map(|i| [(i % k) as f64, (i / k) as f64]).collect()
}

/// A clustering sample or centroid in both representations.
#[derive(Debug, Clone)]
struct Item {
    values: Vec<f64>,
    measure: Option<SignedGridMeasure>,
}

struct Lloyd<'a> {
    cfg: &'a KMeansConfig,
    grid: Vec<Point>,
}

impl Lloyd<'_> {
    fn distance(&self, a: &Item, b: &Item) -> Result<f64> {
        match self.cfg.metric {
            ClusterMetric::Euclidean => Ok(a
                .values
                .iter()
                .zip(&b.values)
                .map(|(x, y)| (x - y) * (x - y))
                .sum()),
            ClusterMetric::Wasserstein => {
                let (Some(ma), Some(mb)) = (&a.measure, &b.measure) else {
                    return Err(Error::invalid("wasserstein item without measure"));
                };
                if a.values == b.values {
                    return Ok(0.0);
                }
                signed_w2(ma, mb, self.cfg.mass_penalty)
            }
        }
    }

    fn item(&self, values: Vec<f64>) -> Result<Item> {
        let measure = match self.cfg.metric {
            ClusterMetric::Wasserstein => {
                Some(SignedGridMeasure::from_values(&self.grid, &values)?)
            }
            ClusterMetric::Euclidean => None,
        };
        Ok(Item { values, measure })
    }

    /// Nearest centroid for every item; ties go to the lower index.
    fn assign(&self, items: &[Item], centers: &[Item]) -> Result<Vec<(usize, f64)>> {
        items
            .par_iter()
            .map(|it| {
                let mut best = (0, f64::INFINITY);
                for (c, center) in centers.iter().enumerate() {
                    let d = self.distance(it, center)?;
                    if d < best.1 {
                        best = (c, d);
                    }
                }
                Ok(best)
            })
            .collect()
    }

    fn mean(&self, members: &[&Item]) -> Result<Item> {
        let n = members.len() as f64;
        match self.cfg.metric {
            ClusterMetric::Euclidean => {
                let mut v = vec![0.0; self.grid.len()];
                for m in members {
                    for (a, b) in v.iter_mut().zip(&m.values) {
                        *a += b / n;
                    }
                }
                self.item(v)
            }
            ClusterMetric::Wasserstein => {
                let parts = |pick: fn(&SignedGridMeasure) -> (&Option<GridMeasure>, f64)| {
                    let mut ms = Vec::new();
                    let mut mass = 0.0;
                    for m in members {
                        let (part, pm) = pick(m.measure.as_ref().expect("wasserstein item"));
                        mass += pm / n;
                        if let Some(p) = part {
                            ms.push(p.clone());
                        }
                    }
                    (ms, mass)
                };
                let (pos, pos_mass) = parts(|s| (&s.positive, s.pos_mass));
                let (neg, neg_mass) = parts(|s| (&s.negative, s.neg_mass));
                let bary = |ms: Vec<GridMeasure>| -> Result<Option<GridMeasure>> {
                    if ms.is_empty() {
                        return Ok(None);
                    }
                    let w = vec![1.0 / ms.len() as f64; ms.len()];
                    barycenter(&ms, &w, &self.grid, &self.cfg.barycenter).map(Some)
                };
                let measure = SignedGridMeasure::new(
                    bary(pos)?,
                    bary(neg)?,
                    if pos_mass > 0.0 { pos_mass } else { 0.0 },
                    if neg_mass > 0.0 { neg_mass } else { 0.0 },
                )?;
                let values = measure.values_on(&self.grid);
                Ok(Item {
                    values,
                    measure: Some(measure),
                })
            }
        }
    }

    /// k-means++ seeding under the configured metric. Stops early when every
    /// remaining item coincides with a chosen seed.
    fn seed(&self, items: &[Item], rng: &mut ChaCha8Rng) -> Result<Vec<Item>> {
        let mut centers = vec![items[rng.gen_range(0..items.len())].clone()];
        let mut dist: Vec<f64> = items
            .par_iter()
            .map(|it| self.distance(it, &centers[0]))
            .collect::<Result<_>>()?;
        while centers.len() < self.cfg.clusters {
            if dist.iter().all(|&d| d <= 0.0) {
                break;
            }
            let pick = WeightedIndex::new(dist.iter().map(|d| d.max(0.0)))
                .map_err(|e| Error::invalid(format!("k-means++ weights: {e}")))?
                .sample(rng);
            let c = items[pick].clone();
            let nd: Vec<f64> = items
                .par_iter()
                .map(|it| self.distance(it, &c))
                .collect::<Result<_>>()?;
            for (d, n) in dist.iter_mut().zip(nd) {
                *d = d.min(n);
            }
            centers.push(c);
        }
        Ok(centers)
    }
}

/// Lloyd iterations on the bank's nonzero slices.
pub fn kmeans(bank: &KernelBank, cfg: &KMeansConfig) -> Result<Centroids> {
    if cfg.clusters == 0 {
        return Err(Error::invalid("number of clusters must be positive"));
    }
    let lloyd = Lloyd {
        cfg,
        grid: kernel_grid(bank.k),
    };
    let mut index = Vec::new();
    let mut items = Vec::new();
    for (i, s) in bank.kernels.iter().enumerate() {
        match cfg.metric {
            ClusterMetric::Wasserstein if s.is_zero() => {
                log::warn!("skipping all-zero kernel {i}");
                continue;
            }
            ClusterMetric::Wasserstein => {
                let measure = kernel_to_measure(s)?;
                items.push(Item {
                    values: s.values.clone(),
                    measure: Some(measure),
                });
            }
            ClusterMetric::Euclidean => items.push(lloyd.item(s.values.clone())?),
        }
        index.push(i);
    }
    if items.is_empty() {
        return Err(Error::invalid("no nonzero kernels to cluster"));
    }
    if cfg.clusters > items.len() {
        return Err(Error::invalid(format!(
            "{} clusters requested for {} kernels",
            cfg.clusters,
            items.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = lloyd.seed(&items, &mut rng)?;
    let degenerate = centers.len() < cfg.clusters;
    if degenerate {
        log::warn!(
            "bank has only {} distinct kernels; returning fewer than {} clusters",
            centers.len(),
            cfg.clusters
        );
    }

    let mut assign = lloyd.assign(&items, &centers)?;
    let mut history = vec![assign.iter().map(|a| a.1).sum::<f64>()];
    for _ in 0..cfg.max_iter {
        let mut changed = false;
        for (c, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Item> = items
                .iter()
                .zip(&assign)
                .filter(|(_, a)| a.0 == c)
                .map(|(it, _)| it)
                .collect();
            if members.is_empty() {
                continue;
            }
            let old_cost: f64 = assign.iter().filter(|a| a.0 == c).map(|a| a.1).sum();
            let cand = match lloyd.mean(&members) {
                Ok(c) => c,
                Err(e @ Error::NotConverged { .. }) => {
                    log::warn!("cluster {c}: keeping previous centroid ({e})");
                    continue;
                }
                Err(e) => return Err(e),
            };
            let mut new_cost = 0.0;
            for m in &members {
                new_cost += lloyd.distance(m, &cand)?;
            }
            if new_cost < old_cost && cand.values != center.values {
                *center = cand;
                changed = true;
            }
        }
        let next = lloyd.assign(&items, &centers)?;
        let moved = next.iter().zip(&assign).any(|(a, b)| a.0 != b.0);
        assign = next;
        let objective: f64 = assign.iter().map(|a| a.1).sum();
        history.push(objective);
        if !changed && !moved {
            break;
        }
    }

    let mut assignment = vec![None; bank.len()];
    for (&i, a) in index.iter().zip(&assign) {
        assignment[i] = Some(a.0);
    }
    Ok(Centroids {
        k: bank.k,
        centers: centers.into_iter().map(|c| c.values).collect(),
        assignment,
        objective_history: history,
        degenerate,
        metric: cfg.metric,
    })
}

/// Clustering in Wasserstein space, the default kernel-prior route.
pub fn wasserstein_kmeans(
    bank: &KernelBank,
    clusters: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Centroids> {
    kmeans(
        bank,
        &KMeansConfig {
            clusters,
            seed,
            max_iter,
            ..KMeansConfig::default()
        },
    )
}

pub fn euclidean_kmeans(
    bank: &KernelBank,
    clusters: usize,
    seed: u64,
    max_iter: usize,
) -> Result<Centroids> {
    kmeans(
        bank,
        &KMeansConfig {
            clusters,
            seed,
            max_iter,
            metric: ClusterMetric::Euclidean,
            ..KMeansConfig::default()
        },
    )
}
