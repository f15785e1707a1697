//! Transportation simplex (MODI / u-v method) for small dense problems.
//!
//! The basis is kept as a spanning tree of `rows + cols - 1` cells over the
//! bipartite row/column graph, degenerate zero-flow cells included, so
//! potentials are always well defined. Entering cells use the most negative
//! reduced cost; after a run of degenerate pivots the solver falls back to
//! Bland's rule to rule out cycling.

use crate::error::{Error, Result};
use crate::transport::TransportPlan;

const DEGENERATE_RUN_LIMIT: usize = 50;

/// Solves `min <C, P>` s.t. `P 1 = a`, `P^T 1 = b`, `P >= 0`.
///
/// `cost` is row-major `a.len() x b.len()`. Both marginals must carry the
/// same total mass.
pub fn solve(a: &[f64], b: &[f64], cost: &[f64]) -> Result<TransportPlan> {
    let (n_full, m_full) = (a.len(), b.len());
    if n_full == 0 || m_full == 0 {
        return Err(Error::invalid("empty marginal"));
    }
    if cost.len() != n_full * m_full {
        return Err(Error::shape("cost matrix size"));
    }
    let (sa, sb): (f64, f64) = (a.iter().sum(), b.iter().sum());
    if (sa - sb).abs() > 1e-9 * sa.max(1.0) {
        return Err(Error::invalid(format!(
            "marginals carry different mass: {sa} vs {sb}"
        )));
    }

    // Zero-mass atoms never carry flow; solve on the positive atoms only.
    let rows: Vec<usize> = (0..n_full).filter(|&i| a[i] > 0.0).collect();
    let cols: Vec<usize> = (0..m_full).filter(|&j| b[j] > 0.0).collect();
    let (n, m) = (rows.len(), cols.len());
    let c = |i: usize, j: usize| cost[rows[i] * m_full + cols[j]];

    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(n + m - 1);
    let mut flow: Vec<f64> = Vec::with_capacity(n + m - 1);
    north_west_corner(
        &rows.iter().map(|&i| a[i]).collect::<Vec<_>>(),
        &cols.iter().map(|&j| b[j]).collect::<Vec<_>>(),
        &mut basis,
        &mut flow,
    );

    let scale = cost.iter().fold(0.0f64, |acc, v| acc.max(v.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let max_iter = 50 * (n + m) * (n + m) + 1000;
    let mut in_basis = vec![false; n * m];
    for &(i, j) in &basis {
        in_basis[i * m + j] = true;
    }
    let mut degenerate_run = 0;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; m];
    let mut converged = false;

    for _ in 0..max_iter {
        let adj = adjacency(n, m, &basis);
        potentials(n, &adj, &basis, &c, &mut u, &mut v);

        let bland = degenerate_run >= DEGENERATE_RUN_LIMIT;
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let rc = c(i, j) - u[i] - v[j];
                if rc < best {
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                    best = rc;
                }
            }
        }
        let Some((ei, ej)) = entering else {
            converged = true;
            break;
        };

        // Tree path from row ei to column ej; cells alternate -theta / +theta.
        let path = tree_path(&adj, ei, n + ej);
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 && (flow[cell] < theta || (flow[cell] == theta && cell < leave)) {
                theta = flow[cell];
                leave = cell;
            }
        }
        for (k, &cell) in path.iter().enumerate() {
            if k % 2 == 0 {
                flow[cell] -= theta;
            } else {
                flow[cell] += theta;
            }
        }
        let (li, lj) = basis[leave];
        in_basis[li * m + lj] = false;
        in_basis[ei * m + ej] = true;
        basis[leave] = (ei, ej);
        flow[leave] = theta;
        degenerate_run = if theta > 0.0 { 0 } else { degenerate_run + 1 };
    }
    if !converged {
        return Err(Error::NotConverged {
            what: "transportation simplex",
            iterations: max_iter,
            residual: f64::NAN,
        });
    }

    let mut coupling = vec![0.0; n_full * m_full];
    let mut total = 0.0;
    for (&(i, j), &f) in basis.iter().zip(&flow) {
        let f = f.max(0.0);
        coupling[rows[i] * m_full + cols[j]] += f;
        total += f * c(i, j);
    }
    Ok(TransportPlan {
        rows: n_full,
        cols: m_full,
        coupling,
        cost: total,
    })
}

/// Initial basic feasible solution with exactly `n + m - 1` cells.
fn north_west_corner(a: &[f64], b: &[f64], basis: &mut Vec<(usize, usize)>, flow: &mut Vec<f64>) {
    let (n, m) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let (mut i, mut j) = (0, 0);
    loop {
        let q = supply[i].min(demand[j]);
        basis.push((i, j));
        flow.push(q);
        supply[i] -= q;
        demand[j] -= q;
        if i == n - 1 && j == m - 1 {
            break;
        }
        // Move down when the row is exhausted (or no columns remain);
        // otherwise move right. Ties move down, leaving a degenerate cell.
        let row_done = supply[i] <= demand[j];
        if (row_done && i < n - 1) || j == m - 1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    // Rounding leftovers land on the final cell so marginals stay exact.
    if let Some(last) = flow.last_mut() {
        *last += supply[n - 1].max(0.0).min(demand[m - 1].max(0.0));
    }
}

/// Node ids: rows `0..n`, columns `n..n + m`. Each entry is (neighbor, cell).
fn adjacency(n: usize, m: usize, basis: &[(usize, usize)]) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n + m];
    for (k, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((n + j, k));
        adj[n + j].push((i, k));
    }
    adj
}

fn potentials(
    n: usize,
    adj: &[Vec<(usize, usize)>],
    basis: &[(usize, usize)],
    c: &impl Fn(usize, usize) -> f64,
    u: &mut [f64],
    v: &mut [f64],
) {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![0usize];
    seen[0] = true;
    u[0] = 0.0;
    while let Some(node) = stack.pop() {
        for &(next, cell) in &adj[node] {
            if seen[next] {
                continue;
            }
            seen[next] = true;
            let (i, j) = basis[cell];
            if next >= n {
                v[j] = c(i, j) - u[i];
            } else {
                u[i] = c(i, j) - v[j];
            }
            stack.push(next);
        }
    }
}

/// Basis cells on the unique tree path `from -> to`, in path order.
fn tree_path(adj: &[Vec<(usize, usize)>], from: usize, to: usize) -> Vec<usize> {
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; adj.len()];
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![from];
    seen[from] = true;
    while let Some(node) = stack.pop() {
        if node == to {
            break;
        }
        for &(next, cell) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, cell));
                stack.push(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = to;
    while node != from {
        let (prev, cell) = parent[node].expect("basis is a spanning tree");
        path.push(cell);
        node = prev;
    }
    path.reverse();
    path
}
