//! Immutable graph storage, disjoint-union batching and node relabeling.
//!
//! Graphs are kept in edge-list form: a `(head, tail)` pair per directed edge
//! plus dense feature rows for nodes and edges. Undirected inputs are
//! symmetrized when the graph is built, so every layer downstream only ever
//! sees directed edges.

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{invalid, Result};

/// Directed multigraph with dense feature arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    node_features: Array2<f64>,
    edge_features: Array2<f64>,
    directed: bool,
}

impl Graph {
    /// Validates and builds a graph. Undirected edges are emitted as two
    /// opposite directed edges sharing the same feature row, in input order.
    pub fn build(
        num_nodes: usize,
        edges: &[(usize, usize)],
        node_features: Array2<f64>,
        edge_features: Array2<f64>,
        directed: bool,
    ) -> Result<Self> {
        if node_features.nrows() != num_nodes {
            return Err(invalid(format!(
                "node feature rows ({}) != num_nodes ({})",
                node_features.nrows(),
                num_nodes
            )));
        }
        if edge_features.nrows() != edges.len() {
            return Err(invalid(format!(
                "edge feature rows ({}) != edge count ({})",
                edge_features.nrows(),
                edges.len()
            )));
        }
        if let Some(&(h, t)) = edges.iter().find(|&&(h, t)| h >= num_nodes || t >= num_nodes) {
            return Err(invalid(format!(
                "edge ({h},{t}) out of range for {num_nodes} nodes"
            )));
        }
        if !node_features.iter().chain(edge_features.iter()).all(|v| v.is_finite()) {
            return Err(invalid("non-finite feature value"));
        }

        if directed {
            return Ok(Graph {
                num_nodes,
                edges: edges.to_vec(),
                node_features,
                edge_features,
                directed,
            });
        }

        let mut sym = Vec::with_capacity(edges.len() * 2);
        let mut rows = Vec::with_capacity(edges.len() * 2);
        for (idx, &(h, t)) in edges.iter().enumerate() {
            sym.push((h, t));
            sym.push((t, h));
            rows.push(idx);
            rows.push(idx);
        }
        let edge_features = edge_features.select(Axis(0), &rows);
        Ok(Graph {
            num_nodes,
            edges: sym,
            node_features,
            edge_features,
            directed,
        })
    }

    /// Builds from already-directed storage without symmetrizing.
    pub(crate) fn from_parts(
        num_nodes: usize,
        edges: Vec<(usize, usize)>,
        node_features: Array2<f64>,
        edge_features: Array2<f64>,
        directed: bool,
    ) -> Self {
        debug_assert_eq!(node_features.nrows(), num_nodes);
        debug_assert_eq!(edge_features.nrows(), edges.len());
        Graph {
            num_nodes,
            edges,
            node_features,
            edge_features,
            directed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn edge_features(&self) -> &Array2<f64> {
        &self.edge_features
    }

    pub fn node_feature_dim(&self) -> usize {
        self.node_features.ncols()
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.edge_features.ncols()
    }

    pub fn is_directed(&self) -> bool {
        self.directed
    }

    /// Out- and in-degree of every node, counting multi-edges.
    pub fn degrees(&self) -> (Vec<usize>, Vec<usize>) {
        let mut out_deg = vec![0; self.num_nodes];
        let mut in_deg = vec![0; self.num_nodes];
        for &(h, t) in &self.edges {
            out_deg[h] += 1;
            in_deg[t] += 1;
        }
        (out_deg, in_deg)
    }
}

/// A bijection on `[0, n)`; node `i` is relabeled `mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; mapping.len()];
        for &m in &mapping {
            if m >= mapping.len() || seen[m] {
                return Err(invalid(format!("{mapping:?} is not a permutation")));
            }
            seen[m] = true;
        }
        Ok(Permutation { mapping })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            mapping: (0..n).collect(),
        }
    }

    /// Uniformly random permutation (Fisher-Yates).
    pub fn random<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Self {
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Permutation { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn mapping(&self) -> &[usize] {
        &self.mapping
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { mapping: inv }
    }

    /// Moves row `i` of `rows` to row `p(i)`.
    pub fn permute_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let inv = self.inverse();
        rows.select(Axis(0), &inv.mapping)
    }
}

/// Relabels node `i` as `p(i)`. Edge order and edge feature rows are kept,
/// only endpoints change.
pub fn permute_nodes(g: &Graph, p: &Permutation) -> Result<Graph> {
    if p.len() != g.num_nodes {
        return Err(invalid(format!(
            "permutation length {} != num_nodes {}",
            p.len(),
            g.num_nodes
        )));
    }
    let edges = g
        .edges
        .iter()
        .map(|&(h, t)| (p.apply(h), p.apply(t)))
        .collect();
    Ok(Graph {
        num_nodes: g.num_nodes,
        edges,
        node_features: p.permute_rows(&g.node_features),
        edge_features: g.edge_features.clone(),
        directed: g.directed,
    })
}

/// Disjoint union of several graphs with membership bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchedGraph {
    underlying: Graph,
    node_offsets: Vec<usize>,
    edge_offsets: Vec<usize>,
    node_graph: Vec<usize>,
    edge_graph: Vec<usize>,
}

impl BatchedGraph {
    pub fn graph(&self) -> &Graph {
        &self.underlying
    }

    /// Node-index offset of every member, in concatenation order.
    pub fn member_offsets(&self) -> &[usize] {
        &self.node_offsets
    }

    pub fn edge_offsets(&self) -> &[usize] {
        &self.edge_offsets
    }

    pub fn num_members(&self) -> usize {
        self.node_offsets.len()
    }

    pub fn node_graph_ids(&self) -> &[usize] {
        &self.node_graph
    }

    pub fn edge_graph_ids(&self) -> &[usize] {
        &self.edge_graph
    }
}

pub fn batch_graphs(graphs: &[&Graph]) -> Result<BatchedGraph> {
    let first = graphs.first().ok_or_else(|| invalid("empty batch"))?;
    let (fn_dim, fe_dim) = (first.node_feature_dim(), first.edge_feature_dim());
    if let Some(g) = graphs
        .iter()
        .find(|g| g.node_feature_dim() != fn_dim || g.edge_feature_dim() != fe_dim)
    {
        return Err(invalid(format!(
            "feature dims ({}, {}) differ from first member ({fn_dim}, {fe_dim})",
            g.node_feature_dim(),
            g.edge_feature_dim()
        )));
    }

    let mut node_offsets = Vec::with_capacity(graphs.len());
    let mut edge_offsets = Vec::with_capacity(graphs.len());
    let mut edges = Vec::new();
    let mut node_graph = Vec::new();
    let mut edge_graph = Vec::new();
    let mut offset = 0;
    for (gid, g) in graphs.iter().enumerate() {
        node_offsets.push(offset);
        edge_offsets.push(edges.len());
        edges.extend(g.edges.iter().map(|&(h, t)| (h + offset, t + offset)));
        node_graph.extend(std::iter::repeat_n(gid, g.num_nodes));
        edge_graph.extend(std::iter::repeat_n(gid, g.num_edges()));
        offset += g.num_nodes;
    }

    let node_views: Vec<_> = graphs.iter().map(|g| g.node_features.view()).collect();
    let edge_views: Vec<_> = graphs.iter().map(|g| g.edge_features.view()).collect();
    let node_features = concatenate(Axis(0), &node_views).expect("node dims checked");
    let edge_features = concatenate(Axis(0), &edge_views).expect("edge dims checked");
    let directed = graphs.iter().any(|g| g.directed);

    Ok(BatchedGraph {
        underlying: Graph::from_parts(offset, edges, node_features, edge_features, directed),
        node_offsets,
        edge_offsets,
        node_graph,
        edge_graph,
    })
}

/// Connected undirected graph: a random spanning tree plus `extra_edges`
/// random distinct non-tree pairs (fewer if the graph saturates), with
/// features uniform in `[-1, 1)`.
pub fn random_connected_graph<R: Rng + ?Sized>(
    num_nodes: usize,
    extra_edges: usize,
    node_dim: usize,
    edge_dim: usize,
    rng: &mut R,
) -> Graph {
    let mut order: Vec<usize> = (0..num_nodes).collect();
    order.shuffle(rng);
    let mut edges: Vec<(usize, usize)> = (1..num_nodes)
        .map(|k| (order[rng.random_range(0..k)], order[k]))
        .collect();
    let max_pairs = num_nodes * num_nodes.saturating_sub(1) / 2;
    let target = (edges.len() + extra_edges).min(max_pairs);
    while edges.len() < target {
        let (i, j) = (rng.random_range(0..num_nodes), rng.random_range(0..num_nodes));
        if i != j && !edges.iter().any(|&(a, b)| (a, b) == (i, j) || (a, b) == (j, i)) {
            edges.push((i, j));
        }
    }
    let nf = Array2::from_shape_fn((num_nodes, node_dim), |_| rng.random_range(-1.0..1.0));
    let ef = Array2::from_shape_fn((edges.len(), edge_dim), |_| rng.random_range(-1.0..1.0));
    Graph::build(num_nodes, &edges, nf, ef, false).expect("generated graph is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn path2() -> Graph {
        Graph::build(2, &[(0, 1)], array![[1.0], [2.0]], array![[5.0]], false).unwrap()
    }

    #[test]
    fn undirected_edges_are_symmetrized() {
        let g = path2();
        assert_eq!(g.edges(), &[(0, 1), (1, 0)]);
        assert_eq!(g.edge_features(), &array![[5.0], [5.0]]);
    }

    #[test]
    fn singleton_graph_is_valid() {
        let g = Graph::build(1, &[], Array2::zeros((1, 3)), Array2::zeros((0, 2)), false).unwrap();
        assert_eq!(g.num_nodes(), 1);
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn out_of_range_edge_rejected() {
        let err = Graph::build(2, &[(0, 5)], Array2::zeros((2, 1)), Array2::zeros((1, 1)), true);
        assert!(err.is_err());
    }

    #[test]
    fn feature_row_mismatch_rejected() {
        assert!(Graph::build(2, &[(0, 1)], Array2::zeros((3, 1)), Array2::zeros((1, 1)), true).is_err());
        assert!(Graph::build(2, &[(0, 1)], Array2::zeros((2, 1)), Array2::zeros((2, 1)), true).is_err());
    }

    #[test]
    fn batch_offsets() {
        let a = Graph::build(3, &[(0, 1), (1, 2)], Array2::zeros((3, 1)), Array2::zeros((2, 1)), false)
            .unwrap();
        let b = path2();
        let batch = batch_graphs(&[&a, &b]).unwrap();
        assert_eq!(batch.member_offsets(), &[0, 3]);
        assert_eq!(batch.graph().num_nodes(), 5);
        assert_eq!(batch.graph().num_edges(), 6);
        assert_eq!(batch.graph().edges()[4], (3, 4));
        assert_eq!(batch.node_graph_ids(), &[0, 0, 0, 1, 1]);
    }

    #[test]
    fn batch_of_one_is_identity() {
        let g = path2();
        let batch = batch_graphs(&[&g]).unwrap();
        assert_eq!(batch.member_offsets(), &[0]);
        assert_eq!(batch.graph(), &g);
    }

    #[test]
    fn empty_batch_rejected() {
        assert!(batch_graphs(&[]).is_err());
    }

    #[test]
    fn batch_dim_mismatch_rejected() {
        let a = path2();
        let b = Graph::build(1, &[], Array2::zeros((1, 2)), Array2::zeros((0, 1)), false).unwrap();
        assert!(batch_graphs(&[&a, &b]).is_err());
    }

    #[test]
    fn identity_permutation_is_noop() {
        let g = path2();
        assert_eq!(permute_nodes(&g, &Permutation::identity(2)).unwrap(), g);
    }

    #[test]
    fn swap_relabels_edge() {
        let g = Graph::build(2, &[(0, 1)], array![[1.0], [2.0]], array![[0.0]], true).unwrap();
        let p = Permutation::new(vec![1, 0]).unwrap();
        let h = permute_nodes(&g, &p).unwrap();
        assert_eq!(h.edges(), &[(1, 0)]);
        assert_eq!(h.node_features(), &array![[2.0], [1.0]]);
    }

    #[test]
    fn permutation_length_mismatch_rejected() {
        assert!(permute_nodes(&path2(), &Permutation::identity(3)).is_err());
        assert!(Permutation::new(vec![0, 0]).is_err());
    }

    fn arb_graph() -> impl Strategy<Value = Graph> {
        (1usize..10).prop_flat_map(|n| {
            let edge = (0..n, 0..n);
            (
                Just(n),
                proptest::collection::vec(edge, 0..20),
                any::<bool>(),
                any::<u64>(),
            )
                .prop_map(|(n, edges, directed, seed)| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let nf = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>());
                    let ef = Array2::from_shape_fn((edges.len(), 3), |_| rng.random::<f64>());
                    Graph::build(n, &edges, nf, ef, directed).unwrap()
                })
        })
    }

    proptest! {
        #[test]
        fn permute_then_inverse_roundtrips(g in arb_graph(), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = Permutation::random(g.num_nodes(), &mut rng);
            let back = permute_nodes(&permute_nodes(&g, &p).unwrap(), &p.inverse()).unwrap();
            prop_assert_eq!(back, g);
        }

        #[test]
        fn batching_preserves_counts(gs in proptest::collection::vec(arb_graph(), 1..5)) {
            let refs: Vec<&Graph> = gs.iter().collect();
            let batch = batch_graphs(&refs).unwrap();
            prop_assert_eq!(batch.graph().num_nodes(), gs.iter().map(Graph::num_nodes).sum::<usize>());
            prop_assert_eq!(batch.graph().num_edges(), gs.iter().map(Graph::num_edges).sum::<usize>());
            let ids = batch.node_graph_ids();
            for &(h, t) in batch.graph().edges() {
                prop_assert_eq!(ids[h], ids[t]);
            }
        }

        #[test]
        fn undirected_edge_count_even(g in arb_graph()) {
            if !g.is_directed() {
                prop_assert_eq!(g.num_edges() % 2, 0);
            }
        }
    }

    #[test]
    fn random_connected_graph_is_connected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 1..9 {
            let g = random_connected_graph(n, 3, 2, 1, &mut rng);
            assert_eq!(g.num_edges(), 2 * (n - 1 + 3).min(n * (n - 1) / 2));
            let mut seen = vec![false; n];
            let mut stack = vec![0];
            while let Some(v) = stack.pop() {
                if !std::mem::replace(&mut seen[v], true) {
                    stack.extend(g.edges().iter().filter(|e| e.0 == v).map(|e| e.1));
                }
            }
            assert!(seen.iter().all(|&s| s));
        }
    }
}
