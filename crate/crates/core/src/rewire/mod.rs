//! Random regular rewiring.
//!
//! A random `r`-regular pseudograph is drawn with the Permutation Model:
//! `r/2` independent uniform permutations `σ_j` of the node set, and one edge
//! `{i, σ_j(i)}` for every node `i` and permutation `j`. Self-loops and
//! repeated pairs are then dropped (no re-sampling) and the remaining simple
//! edges are superimposed on the input graph as pairs of directed edges
//! tagged [`EdgeOrigin::Added`].

mod analysis;

pub use analysis::{diameter, diameter_upper_bound, spectral_gap, simplicity_rate};

use std::collections::HashSet;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{Graph, Permutation};

/// Upper bound on re-sampling attempts when `retry_until_simple` is set. Tiny
/// graphs (n = 2, say) can never produce a simple 2-regular pseudograph.
pub const MAX_SIMPLE_RETRIES: usize = 1000;

/// Multigraph with possible self-loops, as produced by the sampler.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pseudograph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
}

impl Pseudograph {
    /// Builds the pseudograph of explicit permutations, node-major: for each
    /// node `i`, one edge per permutation in order.
    pub fn from_permutations(num_nodes: usize, perms: &[Permutation]) -> Result<Self> {
        if let Some(p) = perms.iter().find(|p| p.len() != num_nodes) {
            return Err(invalid(format!(
                "permutation of length {} for {num_nodes} nodes",
                p.len()
            )));
        }
        let mut edges = Vec::with_capacity(num_nodes * perms.len());
        for i in 0..num_nodes {
            edges.extend(perms.iter().map(|p| (i, p.apply(i))));
        }
        Ok(Pseudograph { num_nodes, edges })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    /// Edge multiset in emission order; each entry is an unordered pair.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Incidences per node; a self-loop counts twice.
    pub fn incidence_counts(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// True when there are no self-loops and no repeated unordered pair.
    pub fn is_simple(&self) -> bool {
        let mut seen = HashSet::with_capacity(self.edges.len());
        self.edges
            .iter()
            .all(|&(i, j)| i != j && seen.insert((i.min(j), i.max(j))))
    }

    /// Edge multiset as sorted normalized pairs, for distribution comparisons.
    pub fn canonical_multiset(&self) -> Vec<(usize, usize)> {
        let mut pairs: Vec<_> = self.edges.iter().map(|&(i, j)| (i.min(j), i.max(j))).collect();
        pairs.sort_unstable();
        pairs
    }
}

fn check_degree(r: usize) -> Result<()> {
    if r % 2 != 0 {
        return Err(invalid(format!("rewiring degree r={r} must be even")));
    }
    Ok(())
}

/// Samples `r/2` uniform permutations and returns their pseudograph.
pub fn sample_permutation_pseudograph<R: Rng + ?Sized>(
    num_nodes: usize,
    r: usize,
    rng: &mut R,
) -> Result<Pseudograph> {
    check_degree(r)?;
    if r < 2 {
        return Err(invalid("the permutation model needs r >= 2"));
    }
    if num_nodes == 0 {
        return Err(invalid("cannot sample a pseudograph on zero nodes"));
    }
    let perms: Vec<_> = (0..r / 2).map(|_| Permutation::random(num_nodes, rng)).collect();
    Pseudograph::from_permutations(num_nodes, &perms)
}

/// Drops self-loops and repeated pairs. Pairs are normalized to `(min, max)`
/// and kept in order of first occurrence.
pub fn simplify_pairs(pairs: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut seen = HashSet::with_capacity(pairs.len());
    pairs
        .iter()
        .filter(|&&(i, j)| i != j)
        .map(|&(i, j)| (i.min(j), i.max(j)))
        .filter(|p| seen.insert(*p))
        .collect()
}

pub fn simplify(pg: &Pseudograph) -> Vec<(usize, usize)> {
    simplify_pairs(&pg.edges)
}

/// Whether a directed edge of a rewired graph came from the input graph or
/// from the superimposed random graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EdgeOrigin {
    Original,
    Added,
}

/// Input graph plus superimposed random edges. Edges of the rewired graph are
/// the base edges in their original order followed by the added ones.
#[derive(Debug, Clone, PartialEq)]
pub struct RewiredGraph {
    base: Graph,
    added_edges: Vec<(usize, usize)>,
}

impl RewiredGraph {
    pub fn base(&self) -> &Graph {
        &self.base
    }

    pub fn num_nodes(&self) -> usize {
        self.base.num_nodes()
    }

    /// Directed added edges, two per simplified random pair.
    pub fn added_edges(&self) -> &[(usize, usize)] {
        &self.added_edges
    }

    pub fn num_edges(&self) -> usize {
        self.base.num_edges() + self.added_edges.len()
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.base
            .edges()
            .iter()
            .chain(self.added_edges.iter())
            .copied()
    }

    pub fn edge_origin(&self, idx: usize) -> EdgeOrigin {
        if idx < self.base.num_edges() {
            EdgeOrigin::Original
        } else {
            EdgeOrigin::Added
        }
    }

    pub fn origins(&self) -> Vec<EdgeOrigin> {
        (0..self.num_edges()).map(|i| self.edge_origin(i)).collect()
    }

    /// In-degree of every node in the rewired graph.
    pub fn in_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for (_, t) in self.edges() {
            deg[t] += 1;
        }
        deg
    }

    /// The rewired topology as a graph. Added edges get all-zero feature rows.
    pub fn to_graph(&self) -> Graph {
        let edges: Vec<_> = self.edges().collect();
        let mut ef = Array2::zeros((edges.len(), self.base.edge_feature_dim()));
        ef.slice_mut(ndarray::s![..self.base.num_edges(), ..])
            .assign(self.base.edge_features());
        Graph::from_parts(
            self.num_nodes(),
            edges,
            self.base.node_features().clone(),
            ef,
            true,
        )
    }
}

/// Adds every pair `{i, j}` as directed edges `(i, j)` and `(j, i)`. Pairs
/// that duplicate an existing edge are still added.
pub fn superimpose(g: &Graph, simple_edges: &[(usize, usize)]) -> Result<RewiredGraph> {
    let n = g.num_nodes();
    if let Some(&(i, j)) = simple_edges.iter().find(|&&(i, j)| i >= n || j >= n) {
        return Err(invalid(format!("added pair ({i},{j}) out of range for {n} nodes")));
    }
    let added_edges = simple_edges
        .iter()
        .flat_map(|&(i, j)| [(i, j), (j, i)])
        .collect();
    Ok(RewiredGraph {
        base: g.clone(),
        added_edges,
    })
}

/// Rewiring hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewireConfig {
    /// Degree of the superimposed random regular graph; even, 0 disables.
    pub r: usize,
    /// Re-sample until the pseudograph is simple instead of simplifying.
    pub retry_until_simple: bool,
}

impl RewireConfig {
    pub fn disabled() -> Self {
        RewireConfig {
            r: 0,
            retry_until_simple: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_degree(self.r)
    }
}

/// Samples the simplified random edge set for `num_nodes` nodes.
pub fn sample_random_edges<R: Rng + ?Sized>(
    num_nodes: usize,
    cfg: &RewireConfig,
    rng: &mut R,
) -> Result<Vec<(usize, usize)>> {
    cfg.validate()?;
    if cfg.r == 0 || num_nodes == 0 {
        return Ok(Vec::new());
    }
    let mut pg = sample_permutation_pseudograph(num_nodes, cfg.r, rng)?;
    if cfg.retry_until_simple {
        let mut attempts = 1;
        while !pg.is_simple() && attempts < MAX_SIMPLE_RETRIES {
            pg = sample_permutation_pseudograph(num_nodes, cfg.r, rng)?;
            attempts += 1;
        }
    }
    Ok(simplify(&pg))
}

/// Draws a fresh random regular graph and superimposes it on `g`.
pub fn rewire<R: Rng + ?Sized>(g: &Graph, cfg: &RewireConfig, rng: &mut R) -> Result<RewiredGraph> {
    let pairs = sample_random_edges(g.num_nodes(), cfg, rng)?;
    superimpose(g, &pairs)
}
