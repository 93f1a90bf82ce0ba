//! Structural measurements used to check what rewiring does to a graph.
//!
//! These are analysis tools, not part of the training path: the spectral gap
//! uses a dense eigensolve and the diameter runs a BFS from every node.

use std::collections::VecDeque;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

use super::sample_permutation_pseudograph;
use crate::error::{invalid, Result};

fn undirected_adjacency(edges: &[(usize, usize)], num_nodes: usize) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); num_nodes];
    for &(i, j) in edges {
        adj[i].push(j);
        adj[j].push(i);
    }
    adj
}

/// Largest eccentricity, treating every edge as undirected. `None` means the
/// graph is disconnected (infinite diameter).
pub fn diameter(edges: &[(usize, usize)], num_nodes: usize) -> Option<usize> {
    let adj = undirected_adjacency(edges, num_nodes);
    let mut dist = vec![usize::MAX; num_nodes];
    let mut queue = VecDeque::with_capacity(num_nodes);
    let mut best = 0;
    for src in 0..num_nodes {
        dist.fill(usize::MAX);
        dist[src] = 0;
        queue.clear();
        queue.push_back(src);
        let mut reached = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    best = best.max(dist[v]);
                    reached += 1;
                    queue.push_back(v);
                }
            }
        }
        if reached < num_nodes {
            return None;
        }
    }
    Some(best)
}

/// Least integer `d` with `(r-1)^(d-1) >= slack * r * n * ln n`, the
/// almost-sure diameter bound for random `r`-regular graphs (`slack` > 2).
pub fn diameter_upper_bound(r: usize, num_nodes: usize, slack: f64) -> usize {
    assert!(r >= 3, "bound needs r >= 3");
    let n = num_nodes as f64;
    let target = slack * r as f64 * n * n.ln();
    let base = (r - 1) as f64;
    let mut d = 1;
    while base.powi(d as i32 - 1) < target {
        d += 1;
    }
    d
}

/// Smallest positive eigenvalue of the combinatorial Laplacian `D - A`.
///
/// Edges are read as undirected pairs; repeated pairs add weight. Returns 0
/// when the graph has no edges at all.
pub fn spectral_gap(edges: &[(usize, usize)], num_nodes: usize) -> Result<f64> {
    if num_nodes == 0 {
        return Err(invalid("spectral gap of an empty graph"));
    }
    let mut lap = DMatrix::<f64>::zeros(num_nodes, num_nodes);
    for &(i, j) in edges {
        if i == j {
            continue;
        }
        lap[(i, j)] -= 1.0;
        lap[(j, i)] -= 1.0;
        lap[(i, i)] += 1.0;
        lap[(j, j)] += 1.0;
    }
    let eig = SymmetricEigen::new(lap);
    let largest = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let tol = 1e-9 * largest.max(1.0);
    let gap = eig
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > tol)
        .fold(f64::INFINITY, f64::min);
    Ok(if gap.is_finite() { gap } else { 0.0 })
}

/// Monte-Carlo fraction of sampled pseudographs that are already simple.
pub fn simplicity_rate<R: Rng + ?Sized>(
    num_nodes: usize,
    r: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    if trials == 0 {
        return Err(invalid("simplicity_rate needs at least one trial"));
    }
    let mut simple = 0usize;
    for _ in 0..trials {
        if sample_permutation_pseudograph(num_nodes, r, rng)?.is_simple() {
            simple += 1;
        }
    }
    Ok(simple as f64 / trials as f64)
}
