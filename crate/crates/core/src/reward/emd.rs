//! Earth mover's distance between uniform marginals: exact min-cost flow and entropic Sinkhorn.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix shape {rows}x{cols} does not match {} entries",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged matrix rows"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn transpose(&self) -> Matrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.at(i, j));
            }
        }
        Matrix { rows: self.cols, cols: self.rows, data }
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.data.chunks(self.cols).map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for r in self.data.chunks(self.cols) {
            for (acc, v) in s.iter_mut().zip(r) {
                *acc += v;
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportPlan {
    pub flow: Matrix,
    /// Σ F·D.
    pub cost: f64,
    /// Dual potentials with `row_duals[i] + col_duals[j] <= D[i][j]`; exact solver only.
    pub row_duals: Option<Vec<f64>>,
    pub col_duals: Option<Vec<f64>>,
}

impl TransportPlan {
    /// Σ a_i·α_i + Σ b_j·β_j, equal to `cost` at optimality.
    pub fn dual_objective(&self) -> Option<f64> {
        let (r, c) = (self.row_duals.as_ref()?, self.col_duals.as_ref()?);
        let a = 1.0 / self.flow.rows as f64;
        let b = 1.0 / self.flow.cols as f64;
        Some(r.iter().sum::<f64>() * a + c.iter().sum::<f64>() * b)
    }
}

fn check_costs(d: &Matrix) -> Result<()> {
    if let Some(v) = d.data.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::invalid(format!("distance matrix entry {v} is not a finite non-negative number")));
    }
    Ok(())
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact optimum under marginals 1/rows and 1/cols.
///
/// Supplies are scaled to integers (`N = lcm(rows, cols)`; each row ships `N/rows`, each
/// column receives `N/cols`) and solved by successive shortest paths with Dijkstra over
/// reduced costs on the dense bipartite residual graph.
pub fn solve_emd(d: &Matrix) -> Result<TransportPlan> {
    check_costs(d)?;
    let (n, m) = (d.rows, d.cols);
    if n == 1 || m == 1 {
        return Ok(degenerate(d));
    }
    let total = (n as u64 / gcd(n as u64, m as u64)) * m as u64;
    let mut supply = vec![total / n as u64; n];
    let mut demand = vec![total / m as u64; m];
    let mut flow = vec![0u64; n * m];
    // node potentials: rows 0..n, columns n..n+m
    let mut pot = vec![0.0f64; n + m];
    let mut remaining = total;

    let mut dist = vec![f64::INFINITY; n + m];
    let mut done = vec![false; n + m];
    let mut parent = vec![usize::MAX; n + m];
    while remaining > 0 {
        dist.fill(f64::INFINITY);
        done.fill(false);
        parent.fill(usize::MAX);
        for i in 0..n {
            if supply[i] > 0 {
                dist[i] = 0.0;
            }
        }
        let mut target = usize::MAX;
        loop {
            let mut u = usize::MAX;
            let mut best = f64::INFINITY;
            for v in 0..n + m {
                if !done[v] && dist[v] < best {
                    best = dist[v];
                    u = v;
                }
            }
            if u == usize::MAX {
                break;
            }
            done[u] = true;
            if u >= n && demand[u - n] > 0 {
                target = u;
                break;
            }
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    if done[v] {
                        continue;
                    }
                    let rc = (d.at(u, j) + pot[u] - pot[v]).max(0.0);
                    if dist[u] + rc < dist[v] {
                        dist[v] = dist[u] + rc;
                        parent[v] = u;
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if done[i] || flow[i * m + j] == 0 {
                        continue;
                    }
                    let rc = (-d.at(i, j) + pot[u] - pot[i]).max(0.0);
                    if dist[u] + rc < dist[i] {
                        dist[i] = dist[u] + rc;
                        parent[i] = u;
                    }
                }
            }
        }
        if target == usize::MAX {
            return Err(Error::Infrastructure("transportation solver found no augmenting path".into()));
        }
        let dt = dist[target];
        for v in 0..n + m {
            pot[v] += dist[v].min(dt);
        }

        // bottleneck along the path
        let mut amount = demand[target - n];
        let mut v = target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u >= n {
                // backward edge column u -> row v
                amount = amount.min(flow[v * m + (u - n)]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);

        let source = v;
        let mut v = target;
        while parent[v] != usize::MAX {
            let u = parent[v];
            if u < n {
                flow[u * m + (v - n)] += amount;
            } else {
                flow[v * m + (u - n)] -= amount;
            }
            v = u;
        }
        supply[source] -= amount;
        demand[target - n] -= amount;
        remaining -= amount;
    }

    let scale = total as f64;
    let data: Vec<f64> = flow.iter().map(|&f| f as f64 / scale).collect();
    let cost = flow
        .iter()
        .zip(&d.data)
        .filter(|(f, _)| **f > 0)
        .map(|(&f, &c)| f as f64 * c)
        .sum::<f64>()
        / scale;
    Ok(TransportPlan {
        flow: Matrix { rows: n, cols: m, data },
        cost,
        row_duals: Some(pot[..n].iter().map(|p| -p).collect()),
        col_duals: Some(pot[n..].to_vec()),
    })
}

/// One side has a single patch: the plan is forced and the cost is a plain mean.
fn degenerate(d: &Matrix) -> TransportPlan {
    let (n, m) = (d.rows, d.cols);
    let w = 1.0 / (n * m) as f64;
    let cost = d.data.iter().sum::<f64>() * w;
    let (row_duals, col_duals) = if n == 1 {
        (vec![0.0], d.data.clone())
    } else {
        (d.data.clone(), vec![0.0])
    };
    TransportPlan {
        flow: Matrix { rows: n, cols: m, data: vec![w; n * m] },
        cost,
        row_duals: Some(row_duals),
        col_duals: Some(col_duals),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iterations: usize,
    /// Stop when the largest marginal violation falls below this.
    pub tolerance: f64,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            epsilon: 0.01,
            max_iterations: 10_000,
            tolerance: 1e-9,
        }
    }
}

fn log_sum_exp(vals: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = vals.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + vals.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Entropy-regularized plan by log-domain Sinkhorn iterations; `cost` is Σ P·D.
pub fn solve_sinkhorn(d: &Matrix, cfg: &SinkhornConfig) -> Result<TransportPlan> {
    check_costs(d)?;
    if !(cfg.epsilon > 0.0) {
        return Err(Error::invalid("sinkhorn epsilon must be > 0"));
    }
    let (n, m) = (d.rows, d.cols);
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let eps = cfg.epsilon;
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let plan = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut p = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                p.push(((f[i] + g[j] - d.at(i, j)) / eps).exp());
            }
        }
        p
    };
    for it in 0..cfg.max_iterations {
        for i in 0..n {
            f[i] = eps * log_a - eps * log_sum_exp((0..m).map(|j| (g[j] - d.at(i, j)) / eps));
        }
        for j in 0..m {
            g[j] = eps * log_b - eps * log_sum_exp((0..n).map(|i| (f[i] - d.at(i, j)) / eps));
        }
        if it % 10 == 9 || it + 1 == cfg.max_iterations {
            let p = Matrix { rows: n, cols: m, data: plan(&f, &g) };
            let err = p
                .row_sums()
                .iter()
                .map(|s| (s - 1.0 / n as f64).abs())
                .fold(0.0, f64::max);
            if err < cfg.tolerance {
                break;
            }
        }
    }
    let data = plan(&f, &g);
    let cost = data.iter().zip(&d.data).map(|(p, c)| p * c).sum();
    Ok(TransportPlan {
        flow: Matrix { rows: n, cols: m, data },
        cost,
        row_duals: None,
        col_duals: None,
    })
}
