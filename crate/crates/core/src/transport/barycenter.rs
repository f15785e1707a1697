//! Fixed-support Wasserstein barycenters by iterative Bregman projections.
//!
//! Everything runs in the log domain so very small regularisers stay stable.
//! The ground cost is divided by its largest entry before use, so `epsilon`
//! is relative to the squared diameter of the problem. The regulariser is
//! annealed geometrically from `eps_start` to `eps_end`, warm-starting the
//! dual potentials between stages.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::transport::{check_weights, sq_dist, GridMeasure, Point};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BarycenterConfig {
    pub eps_start: f64,
    pub eps_end: f64,
    /// Number of geometric annealing stages, including both endpoints.
    pub stages: usize,
    /// Iteration cap per stage.
    pub max_iter: usize,
    /// L1 marginal violation at which the final stage stops.
    pub tol: f64,
}

impl Default for BarycenterConfig {
    fn default() -> Self {
        BarycenterConfig {
            eps_start: 1e-1,
            eps_end: 1e-3,
            stages: 5,
            max_iter: 5000,
            tol: 1e-9,
        }
    }
}

impl BarycenterConfig {
    fn epsilons(&self) -> Vec<f64> {
        if self.stages <= 1 {
            return vec![self.eps_end];
        }
        let ratio = (self.eps_end / self.eps_start).powf(1.0 / (self.stages - 1) as f64);
        (0..self.stages)
            .map(|s| self.eps_start * ratio.powi(s as i32))
            .collect()
    }
}

#[inline]
fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// One input restricted to its positive atoms, with normalized costs to the
/// barycenter support stored row-major `atoms x support`.
struct Input {
    log_mass: Vec<f64>,
    cost: Vec<f64>,
}

/// Minimiser of `sum_i weights[i] * W2^2(measures[i], nu)` over measures `nu`
/// supported on `support` (entropic approximation).
pub fn barycenter(
    measures: &[GridMeasure],
    weights: &[f64],
    support: &[Point],
    cfg: &BarycenterConfig,
) -> Result<GridMeasure> {
    check_weights(measures.len(), weights)?;
    if support.is_empty() {
        return Err(Error::invalid("barycenter support is empty"));
    }
    if !(cfg.eps_start > 0.0 && cfg.eps_end > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let m = support.len();
    let active: Vec<&GridMeasure> = measures
        .iter()
        .zip(weights)
        .filter(|(_, &w)| w > 0.0)
        .map(|(mu, _)| mu)
        .collect();
    if let [only] = active[..] {
        // The barycenter of a single measure is the measure itself.
        if let Some(mass) = embed(only, support) {
            return GridMeasure::new(support.to_vec(), mass);
        }
    }
    let mut inputs: Vec<(Input, f64)> = Vec::new();
    let mut cmax: f64 = 0.0;
    for (mu, &w) in measures.iter().zip(weights) {
        if w == 0.0 {
            continue;
        }
        let mut log_mass = Vec::new();
        let mut cost = Vec::new();
        for (p, &a) in mu.support().iter().zip(mu.mass()) {
            if a > 0.0 {
                log_mass.push(a.ln());
                for q in support {
                    let c = sq_dist(p, q);
                    cmax = cmax.max(c);
                    cost.push(c);
                }
            }
        }
        inputs.push((Input { log_mass, cost }, w));
    }
    if cmax == 0.0 {
        // every input is a Dirac on the single support point
        return GridMeasure::new(support.to_vec(), vec![1.0 / m as f64; m]);
    }
    for (inp, _) in &mut inputs {
        inp.cost.iter_mut().for_each(|c| *c /= cmax);
    }

    let mut state = Potentials {
        f: inputs
            .iter()
            .map(|(inp, _)| vec![0.0; inp.log_mass.len()])
            .collect(),
        g: inputs.iter().map(|_| vec![0.0; m]).collect(),
        log_b: vec![0.0; m],
    };
    let epsilons = cfg.epsilons();
    let last = epsilons.len() - 1;
    for (stage, &eps) in epsilons.iter().enumerate() {
        let final_stage = stage == last;
        let tol = if final_stage { cfg.tol } else { cfg.tol.max(1e-6) };
        let (it, residual) = match scaling_stage(&inputs, &mut state, m, eps, tol, cfg.max_iter) {
            Some(done) => done,
            None => log_stage(&inputs, &mut state, m, eps, tol, cfg.max_iter),
        };
        if final_stage && residual > tol {
            return Err(Error::NotConverged {
                what: "barycenter",
                iterations: it,
                residual,
            });
        }
    }
    let log_b = state.log_b;

    let max = log_b.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_b.iter().map(|v| (v - max).exp()).collect();
    GridMeasure::from_weights(support.to_vec(), w)
}

/// Dual potentials per input plus the log of the current barycenter.
struct Potentials {
    f: Vec<Vec<f64>>,
    g: Vec<Vec<f64>>,
    log_b: Vec<f64>,
}

/// Largest `C / eps` for which `exp(-C / eps)` stays a normal f64.
const SCALING_LIMIT: f64 = 600.0;

/// One annealing stage with multiplicative scalings `u = exp(f)`,
/// `v = exp(g)`. Returns `None` (state untouched) when `eps` is too small
/// for the kernel or the scalings leave the finite range.
fn scaling_stage(
    inputs: &[(Input, f64)],
    state: &mut Potentials,
    m: usize,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> Option<(usize, f64)> {
    if 1.0 / eps > SCALING_LIMIT {
        return None;
    }
    let kernels: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(inp, _)| inp.cost.iter().map(|c| (-c / eps).exp()).collect())
        .collect();
    let mass: Vec<Vec<f64>> = inputs
        .iter()
        .map(|(inp, _)| inp.log_mass.iter().map(|l| l.exp()).collect())
        .collect();
    // Gauge shift so every v starts at most 1.
    let mut u = Vec::with_capacity(inputs.len());
    let mut v = Vec::with_capacity(inputs.len());
    for (fi, gi) in state.f.iter().zip(&state.g) {
        let shift = gi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        u.push(fi.iter().map(|f| (f + shift).exp()).collect::<Vec<f64>>());
        v.push(gi.iter().map(|g| (g - shift).exp()).collect::<Vec<f64>>());
    }
    let mut log_b = state.log_b.clone();
    let mut ktu = vec![vec![0.0; m]; inputs.len()];
    let mut it = 0;
    let residual = loop {
        it += 1;
        let mut residual = 0.0f64;
        for (((k, a), ui), vi) in kernels.iter().zip(&mass).zip(u.iter_mut()).zip(&v) {
            let mut viol = 0.0;
            for (r, uk) in ui.iter_mut().enumerate() {
                let kv: f64 = k[r * m..(r + 1) * m].iter().zip(vi).map(|(x, y)| x * y).sum();
                let new = a[r] / kv;
                viol += a[r] * (1.0 - *uk / new).abs();
                *uk = new;
            }
            residual = residual.max(viol);
        }
        if !residual.is_finite() {
            return None;
        }
        if (it > 1 && residual <= tol) || it >= max_iter {
            break residual;
        }
        for ((k, ui), col) in kernels.iter().zip(&u).zip(ktu.iter_mut()) {
            col.iter_mut().for_each(|c| *c = 0.0);
            for (r, uk) in ui.iter().enumerate() {
                for (c, kk) in col.iter_mut().zip(&k[r * m..(r + 1) * m]) {
                    *c += kk * uk;
                }
            }
        }
        for (j, lb) in log_b.iter_mut().enumerate() {
            *lb = inputs
                .iter()
                .zip(&ktu)
                .map(|((_, w), col)| w * col[j].ln())
                .sum();
        }
        for (vi, col) in v.iter_mut().zip(&ktu) {
            for j in 0..m {
                vi[j] = log_b[j].exp() / col[j];
            }
        }
    };
    let f: Vec<Vec<f64>> = u.iter().map(|ui| ui.iter().map(|x| x.ln()).collect()).collect();
    let g: Vec<Vec<f64>> = v.iter().map(|vi| vi.iter().map(|x| x.ln()).collect()).collect();
    let finite = |p: &Vec<Vec<f64>>| p.iter().flatten().all(|x| x.is_finite());
    if !finite(&f) || !finite(&g) || log_b.iter().any(|x| !x.is_finite()) {
        return None;
    }
    state.f = f;
    state.g = g;
    state.log_b = log_b;
    Some((it, residual))
}

/// One annealing stage in the log domain; stable for any `eps`.
fn log_stage(
    inputs: &[(Input, f64)],
    state: &mut Potentials,
    m: usize,
    eps: f64,
    tol: f64,
    max_iter: usize,
) -> (usize, f64) {
    let Potentials { f, g, log_b } = state;
    let mut it = 0;
    loop {
        it += 1;
        // Row projection: f = log a - LSE_j(g_j - C_kj / eps). The previous
        // plan's rows were a * exp(f_old - f_new); its columns were b.
        let mut residual = 0.0f64;
        for ((inp, _), (fi, gi)) in inputs.iter().zip(f.iter_mut().zip(g.iter())) {
            let mut viol = 0.0;
            for (k, fk) in fi.iter_mut().enumerate() {
                let row = &inp.cost[k * m..(k + 1) * m];
                let lse = log_sum_exp(row.iter().zip(gi).map(|(c, gj)| gj - c / eps));
                let new = inp.log_mass[k] - lse;
                viol += inp.log_mass[k].exp() * (1.0 - (*fk - new).exp()).abs();
                *fk = new;
            }
            residual = residual.max(viol);
        }
        if (it > 1 && residual <= tol) || it >= max_iter {
            return (it, residual);
        }
        // Column projection onto the common marginal b (geometric mean).
        let log_kt: Vec<Vec<f64>> = inputs
            .iter()
            .zip(f.iter())
            .map(|((inp, _), fi)| {
                let n = fi.len();
                (0..m)
                    .map(|j| log_sum_exp((0..n).map(|k| fi[k] - inp.cost[k * m + j] / eps)))
                    .collect()
            })
            .collect();
        for (j, lb) in log_b.iter_mut().enumerate() {
            *lb = inputs
                .iter()
                .zip(&log_kt)
                .map(|((_, w), col)| w * col[j])
                .sum();
        }
        for (gi, col) in g.iter_mut().zip(&log_kt) {
            for j in 0..m {
                gi[j] = log_b[j] - col[j];
            }
        }
    }
}

/// Masses of `mu` laid out on `support`, if every atom with mass lies on it.
fn embed(mu: &GridMeasure, support: &[Point]) -> Option<Vec<f64>> {
    let mut out = vec![0.0; support.len()];
    for (p, &a) in mu.support().iter().zip(mu.mass()) {
        if a > 0.0 {
            let i = support.iter().position(|q| q == p)?;
            out[i] += a;
        }
    }
    Some(out)
}
