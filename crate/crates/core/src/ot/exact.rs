//! Unregularised transport by successive shortest paths on the bipartite
//! transportation network.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use ndarray::Array2;

use super::PointCloud;
use crate::kernels::sq_dist;
use crate::{Error, Result};

/// Largest `N·M` accepted by [`exact_ot`].
pub const EXACT_OT_MAX_CELLS: usize = 10_000;

const MASS_EPS: f64 = 1e-15;

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

/// Exact `min_π ⟨π, C⟩` over couplings of the two clouds' weights.
pub fn exact_ot(a: &PointCloud, b: &PointCloud) -> Result<f64> {
    let (n, m) = (a.len(), b.len());
    if n * m > EXACT_OT_MAX_CELLS {
        return Err(Error::Argument(format!(
            "exact transport is limited to {EXACT_OT_MAX_CELLS} cells, got {n}x{m}"
        )));
    }
    if a.dim() != b.dim() {
        return Err(Error::Argument("point clouds have different dimensions".into()));
    }
    let c = sq_dist(&a.points(), &b.points());
    let flow = transport_plan(&c, a.weights().as_slice().unwrap(), b.weights().as_slice().unwrap());
    Ok((&flow * &c).sum())
}

/// Min-cost flow from supplies `a` to demands `b`. Nodes `0..n` are sources
/// and `n..n+m` sinks; residual arcs run source→sink with unbounded capacity
/// and sink→source with the current flow.
pub(crate) fn transport_plan(c: &Array2<f64>, a: &[f64], b: &[f64]) -> Array2<f64> {
    let (n, m) = c.dim();
    let mut flow = Array2::<f64>::zeros((n, m));
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut pot = vec![0.0; n + m];
    let mut dist = vec![0.0; n + m];
    let mut prev = vec![usize::MAX; n + m];
    let mut done = vec![false; n + m];

    loop {
        if supply.iter().all(|&s| s <= MASS_EPS) || demand.iter().all(|&d| d <= MASS_EPS) {
            break;
        }
        dist.fill(f64::INFINITY);
        prev.fill(usize::MAX);
        done.fill(false);
        let mut heap = BinaryHeap::new();
        for i in 0..n {
            if supply[i] > MASS_EPS {
                dist[i] = 0.0;
                heap.push(Entry(0.0, i));
            }
        }
        while let Some(Entry(d, u)) = heap.pop() {
            if done[u] || d > dist[u] {
                continue;
            }
            done[u] = true;
            if u < n {
                for j in 0..m {
                    let v = n + j;
                    let rc = (c[[u, j]] + pot[u] - pot[v]).max(0.0);
                    if d + rc < dist[v] {
                        dist[v] = d + rc;
                        prev[v] = u;
                        heap.push(Entry(dist[v], v));
                    }
                }
            } else {
                let j = u - n;
                for i in 0..n {
                    if flow[[i, j]] > MASS_EPS {
                        let rc = (-c[[i, j]] + pot[u] - pot[i]).max(0.0);
                        if d + rc < dist[i] {
                            dist[i] = d + rc;
                            prev[i] = u;
                            heap.push(Entry(dist[i], i));
                        }
                    }
                }
            }
        }
        let Some(sink) = (n..n + m)
            .filter(|&v| demand[v - n] > MASS_EPS && dist[v].is_finite())
            .min_by(|&x, &y| dist[x].total_cmp(&dist[y]))
        else {
            break;
        };
        for v in 0..n + m {
            if dist[v].is_finite() {
                pot[v] += dist[v];
            } else {
                pot[v] += dist[sink];
            }
        }
        // Bottleneck along the path.
        let mut amount = demand[sink - n];
        let mut v = sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u >= n {
                amount = amount.min(flow[[v, u - n]]);
            }
            v = u;
        }
        amount = amount.min(supply[v]);
        let origin = v;
        let mut v = sink;
        while prev[v] != usize::MAX {
            let u = prev[v];
            if u < n {
                flow[[u, v - n]] += amount;
            } else {
                flow[[v, u - n]] -= amount;
            }
            v = u;
        }
        supply[origin] -= amount;
        demand[sink - n] -= amount;
    }
    flow
}
