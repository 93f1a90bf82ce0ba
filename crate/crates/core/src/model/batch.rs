//! Disjoint union of rewired graphs with everything a forward pass reads.

use ndarray::{concatenate, Array2, Axis};
use rand::Rng;

use crate::dataset::{Sample, Target};
use crate::encode::cache::GraphEncoding;
use crate::encode::lookup_encodings;
use crate::error::{invalid, Result};
use crate::graph::Permutation;
use crate::nn::AttentionTopology;
use crate::rewire::{rewire, EdgeOrigin, RewireConfig, RewiredGraph};

/// One rewired graph with its precomputed structure and target.
#[derive(Debug, Clone, Copy)]
pub struct BatchItem<'a> {
    pub rewired: &'a RewiredGraph,
    pub encoding: &'a GraphEncoding,
    pub target: &'a Target,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub num_graphs: usize,
    /// Edges of the rewired graphs in H's orientation.
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub edge_added: Vec<bool>,
    pub node_graph: Vec<usize>,
    pub edge_graph: Vec<usize>,
    pub node_feat: Array2<f64>,
    /// Zero rows on added edges.
    pub edge_feat: Array2<f64>,
    /// `|V|×k` and `|E_H|×k`; zero columns when RRWP is disabled.
    pub node_rw: Array2<f64>,
    pub edge_rw: Array2<f64>,
    /// Degrees in the input graphs, before rewiring.
    pub out_degree: Vec<usize>,
    pub in_degree: Vec<usize>,
    pub targets: Vec<Target>,
}

impl PreparedBatch {
    pub fn build(items: &[BatchItem<'_>], use_rrwp: bool) -> Result<Self> {
        if items.is_empty() {
            return Err(invalid("cannot prepare an empty batch"));
        }
        let mut b = PreparedBatch {
            num_graphs: items.len(),
            src: Vec::new(),
            dst: Vec::new(),
            edge_added: Vec::new(),
            node_graph: Vec::new(),
            edge_graph: Vec::new(),
            node_feat: Array2::zeros((0, 0)),
            edge_feat: Array2::zeros((0, 0)),
            node_rw: Array2::zeros((0, 0)),
            edge_rw: Array2::zeros((0, 0)),
            out_degree: Vec::new(),
            in_degree: Vec::new(),
            targets: Vec::new(),
        };
        let (mut nf, mut ef, mut nrw, mut erw) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        let mut offset = 0;
        for (gi, item) in items.iter().enumerate() {
            let h = item.rewired;
            let n = h.num_nodes();
            if item.encoding.rrwp.num_nodes() != n || item.encoding.degrees.out_degree.len() != n {
                return Err(invalid(format!("graph {gi}: encoding does not match the graph")));
            }
            for (i, j) in h.edges() {
                b.src.push(i + offset);
                b.dst.push(j + offset);
            }
            b.edge_added.extend(h.origins().into_iter().map(|o| o == EdgeOrigin::Added));
            b.node_graph.extend(std::iter::repeat_n(gi, n));
            b.edge_graph.extend(std::iter::repeat_n(gi, h.num_edges()));
            let hg = h.to_graph();
            nf.push(hg.node_features().clone());
            ef.push(hg.edge_features().clone());
            if use_rrwp {
                let (nr, er) = lookup_encodings(&item.encoding.rrwp, h)?;
                nrw.push(nr);
                erw.push(er);
            } else {
                nrw.push(Array2::zeros((n, 0)));
                erw.push(Array2::zeros((h.num_edges(), 0)));
            }
            b.out_degree.extend(&item.encoding.degrees.out_degree);
            b.in_degree.extend(&item.encoding.degrees.in_degree);
            b.targets.push(item.target.clone());
            offset += n;
        }
        let cat = |parts: &[Array2<f64>]| -> Result<Array2<f64>> {
            let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
            concatenate(Axis(0), &views).map_err(|_| invalid("feature widths differ across the batch"))
        };
        b.node_feat = cat(&nf)?;
        b.edge_feat = cat(&ef)?;
        b.node_rw = cat(&nrw)?;
        b.edge_rw = cat(&erw)?;
        Ok(b)
    }

    /// Rewires every sample with draws from `rng`, in order, and batches them.
    pub fn sample<R: Rng + ?Sized>(
        samples: &[(&Sample, &GraphEncoding)],
        rewire_cfg: &RewireConfig,
        use_rrwp: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let rewired = samples
            .iter()
            .map(|(s, _)| rewire(&s.graph, rewire_cfg, rng))
            .collect::<Result<Vec<_>>>()?;
        let items: Vec<BatchItem<'_>> = samples
            .iter()
            .zip(&rewired)
            .map(|((s, enc), h)| BatchItem {
                rewired: h,
                encoding: enc,
                target: &s.target,
            })
            .collect();
        Self::build(&items, use_rrwp)
    }

    pub fn num_nodes(&self) -> usize {
        self.node_graph.len()
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn topology(&self) -> AttentionTopology {
        AttentionTopology::new(self.num_nodes(), self.src.clone(), self.dst.clone())
    }

    /// Relabels nodes with one permutation over the whole union (which must
    /// map every member onto itself). Edge order, and therefore edge-indexed
    /// masks, is unchanged.
    pub fn permute_nodes(&self, p: &Permutation) -> Result<Self> {
        if p.len() != self.num_nodes() {
            return Err(invalid("permutation length does not match the batch"));
        }
        if (0..p.len()).any(|i| self.node_graph[p.apply(i)] != self.node_graph[i]) {
            return Err(invalid("permutation moves nodes between graphs"));
        }
        let relabel = |v: &[usize]| -> Vec<usize> { v.iter().map(|&i| p.apply(i)).collect() };
        let permute_vec = |v: &[usize]| -> Vec<usize> {
            let mut out = vec![0; v.len()];
            for (i, &x) in v.iter().enumerate() {
                out[p.apply(i)] = x;
            }
            out
        };
        Ok(PreparedBatch {
            num_graphs: self.num_graphs,
            src: relabel(&self.src),
            dst: relabel(&self.dst),
            edge_added: self.edge_added.clone(),
            node_graph: permute_vec(&self.node_graph),
            edge_graph: self.edge_graph.clone(),
            node_feat: p.permute_rows(&self.node_feat),
            edge_feat: self.edge_feat.clone(),
            node_rw: p.permute_rows(&self.node_rw),
            edge_rw: self.edge_rw.clone(),
            out_degree: permute_vec(&self.out_degree),
            in_degree: permute_vec(&self.in_degree),
            targets: self.targets.clone(),
        })
    }
}
