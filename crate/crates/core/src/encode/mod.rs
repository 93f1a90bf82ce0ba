//! Structural encodings: random-walk probabilities (RRWP) and degrees, and
//! the learned encoders that turn them into node and edge states.

pub mod cache;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::Graph;
use crate::nn::norm::{BatchNorm, BatchNormCache, Mode};
use crate::nn::ops::{gather_rows, scatter_add_rows};
use crate::nn::param::{fan_in_uniform, join, view1, view1_mut, view2, view2_mut, ParamKind, ParamView, ParamViewMut, Parameters};
use crate::rewire::RewiredGraph;

/// Row-stochastic transition matrix `T = D⁻¹A` in sparse row form. Repeated
/// edges add weight; rows of nodes without out-edges are empty.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<(usize, f64)>>,
}

impl TransitionMatrix {
    pub fn num_nodes(&self) -> usize {
        self.rows.len()
    }

    /// Nonzero entries of row `i`, sorted by column.
    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        &self.rows[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.rows[i]
            .binary_search_by_key(&j, |&(c, _)| c)
            .map_or(0.0, |pos| self.rows[i][pos].1)
    }
}

pub fn transition_matrix(g: &Graph) -> TransitionMatrix {
    let n = g.num_nodes();
    let mut counts: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(h, t) in g.edges() {
        counts[h].push(t);
    }
    let rows = counts
        .into_iter()
        .map(|mut targets| {
            targets.sort_unstable();
            let total = targets.len() as f64;
            let mut row: Vec<(usize, f64)> = Vec::new();
            for t in targets {
                match row.last_mut() {
                    Some((c, w)) if *c == t => *w += 1.0,
                    _ => row.push((t, 1.0)),
                }
            }
            for (_, w) in &mut row {
                *w /= total;
            }
            row
        })
        .collect();
    TransitionMatrix { rows }
}

/// Stacked walk probabilities `P_h = T^h`, `h = 1..=k`.
///
/// Row `i` stores the union of the supports of `P_1[i], ..., P_k[i]` with `k`
/// values per stored column; columns outside the support are zero at every
/// step. Diagonals are kept in a separate dense `|V|×k` block.
#[derive(Debug, Clone, PartialEq)]
pub struct RrwpTensor {
    k: usize,
    num_nodes: usize,
    diag: Vec<f64>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl RrwpTensor {
    pub(crate) fn from_raw(
        k: usize,
        num_nodes: usize,
        diag: Vec<f64>,
        row_ptr: Vec<usize>,
        cols: Vec<usize>,
        vals: Vec<f64>,
    ) -> Result<Self> {
        let nnz = cols.len();
        let ok = k >= 1
            && diag.len() == num_nodes * k
            && row_ptr.len() == num_nodes + 1
            && row_ptr.first() == Some(&0)
            && row_ptr.last() == Some(&nnz)
            && row_ptr.windows(2).all(|w| w[0] <= w[1])
            && vals.len() == nnz * k
            && cols.iter().all(|&c| c < num_nodes)
            && (0..num_nodes).all(|i| cols[row_ptr[i]..row_ptr[i + 1]].windows(2).all(|w| w[0] < w[1]))
            && vals.iter().chain(diag.iter()).all(|v| (0.0..=1.0 + 1e-12).contains(v));
        if !ok {
            return Err(invalid("inconsistent RRWP tensor layout"));
        }
        Ok(RrwpTensor {
            k,
            num_nodes,
            diag,
            row_ptr,
            cols,
            vals,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub(crate) fn raw_parts(&self) -> (&[f64], &[usize], &[usize], &[f64]) {
        (&self.diag, &self.row_ptr, &self.cols, &self.vals)
    }

    /// `[P_1[i][i], ..., P_k[i][i]]`.
    pub fn diagonal(&self, i: usize) -> &[f64] {
        &self.diag[i * self.k..(i + 1) * self.k]
    }

    /// `[P_1[i][j], ..., P_k[i][j]]`, or `None` when `j` is unreachable from
    /// `i` within `k` steps.
    pub fn pair(&self, i: usize, j: usize) -> Option<&[f64]> {
        let (lo, hi) = (self.row_ptr[i], self.row_ptr[i + 1]);
        self.cols[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|pos| &self.vals[(lo + pos) * self.k..(lo + pos + 1) * self.k])
    }

    /// `P_h[i][j]` with 1-based step `h`.
    pub fn get(&self, h: usize, i: usize, j: usize) -> f64 {
        assert!((1..=self.k).contains(&h), "step {h} outside 1..={}", self.k);
        self.pair(i, j).map_or(0.0, |v| v[h - 1])
    }

    /// Nonzero entries of `P_h[i]` with 1-based step `h`.
    pub fn step_row(&self, h: usize, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        assert!((1..=self.k).contains(&h), "step {h} outside 1..={}", self.k);
        let k = self.k;
        (self.row_ptr[i]..self.row_ptr[i + 1])
            .map(move |idx| (self.cols[idx], self.vals[idx * k + h - 1]))
            .filter(|&(_, p)| p != 0.0)
    }
}

/// Computes `P = [T, T², ..., T^k]` by propagating each start node's
/// distribution `k` steps through the sparse rows of `T`.
pub fn rrwp(g: &Graph, k: usize) -> Result<RrwpTensor> {
    if k < 1 {
        return Err(invalid("RRWP walk length k must be at least 1"));
    }
    let t = transition_matrix(g);
    let n = g.num_nodes();
    let mut diag = vec![0.0; n * k];
    let mut row_ptr = Vec::with_capacity(n + 1);
    let mut cols = Vec::new();
    let mut vals = Vec::new();
    row_ptr.push(0);

    let mut cur = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut cur_support: Vec<usize> = Vec::new();
    let mut next_support: Vec<usize> = Vec::new();
    let mut marked = vec![false; n];
    // slot[j]: position of column j in this row's union support
    let mut slot = vec![usize::MAX; n];
    let mut support: Vec<usize> = Vec::new();
    let mut row_vals: Vec<f64> = Vec::new();

    for i in 0..n {
        support.clear();
        row_vals.clear();
        cur_support.clear();
        cur_support.push(i);
        cur[i] = 1.0;
        for h in 0..k {
            for &u in &cur_support {
                let pu = cur[u];
                for &(v, w) in t.row(u) {
                    if !marked[v] {
                        marked[v] = true;
                        next_support.push(v);
                    }
                    next[v] += pu * w;
                }
                cur[u] = 0.0;
            }
            for &v in &next_support {
                marked[v] = false;
            }
            std::mem::swap(&mut cur, &mut next);
            std::mem::swap(&mut cur_support, &mut next_support);
            next_support.clear();
            for &v in &cur_support {
                if slot[v] == usize::MAX {
                    slot[v] = support.len();
                    support.push(v);
                    row_vals.extend(std::iter::repeat_n(0.0, k));
                }
                row_vals[slot[v] * k + h] = cur[v];
            }
        }
        for &u in &cur_support {
            cur[u] = 0.0;
        }
        let mut order: Vec<usize> = (0..support.len()).collect();
        order.sort_unstable_by_key(|&s| support[s]);
        for s in order {
            let j = support[s];
            cols.push(j);
            vals.extend_from_slice(&row_vals[s * k..(s + 1) * k]);
            if j == i {
                diag[i * k..(i + 1) * k].copy_from_slice(&row_vals[s * k..(s + 1) * k]);
            }
            slot[j] = usize::MAX;
        }
        row_ptr.push(cols.len());
    }
    RrwpTensor::from_raw(k, n, diag, row_ptr, cols, vals)
}

/// Out- and in-degrees of the input graph, before rewiring.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeTable {
    pub out_degree: Vec<usize>,
    pub in_degree: Vec<usize>,
}

impl DegreeTable {
    pub fn of(g: &Graph) -> Self {
        let (out_degree, in_degree) = g.degrees();
        DegreeTable { out_degree, in_degree }
    }

    pub fn max_out(&self) -> usize {
        self.out_degree.iter().copied().max().unwrap_or(0)
    }

    pub fn max_in(&self) -> usize {
        self.in_degree.iter().copied().max().unwrap_or(0)
    }
}

/// Raw RRWP inputs of a rewired graph: diagonal rows per node and pair rows
/// for every directed edge of `h`, original and added.
pub fn lookup_encodings(p: &RrwpTensor, h: &RewiredGraph) -> Result<(Array2<f64>, Array2<f64>)> {
    if p.num_nodes() != h.num_nodes() {
        return Err(invalid(format!(
            "RRWP tensor has {} nodes but the rewired graph has {}",
            p.num_nodes(),
            h.num_nodes()
        )));
    }
    let k = p.k();
    let node_raw = Array2::from_shape_fn((p.num_nodes(), k), |(i, s)| p.diagonal(i)[s]);
    let mut edge_raw = Array2::zeros((h.num_edges(), k));
    for (idx, (i, j)) in h.edges().enumerate() {
        if let Some(v) = p.pair(i, j) {
            edge_raw.row_mut(idx).assign(&ndarray::ArrayView1::from(v));
        }
    }
    Ok((node_raw, edge_raw))
}

/// How degrees are encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegreeMode {
    /// Embedding table when `(D⁺+1)(D⁻+1) <= 4096`, linear otherwise.
    Auto,
    Table,
    Linear,
}

/// Largest table size for which [`DegreeMode::Auto`] picks a table.
pub const DEGREE_TABLE_LIMIT: usize = 4096;

impl DegreeMode {
    pub fn resolve(self, max_out: usize, max_in: usize) -> DegreeMode {
        match self {
            DegreeMode::Auto if (max_out + 1) * (max_in + 1) <= DEGREE_TABLE_LIMIT => DegreeMode::Table,
            DegreeMode::Auto => DegreeMode::Linear,
            m => m,
        }
    }
}

/// Learned degree encoder.
#[derive(Debug, Clone, PartialEq)]
pub enum DegreeEncoder {
    /// Row `d⁺·(D⁻+1) + d⁻`; degrees above the maxima are clamped.
    Table {
        max_out: usize,
        max_in: usize,
        table: Array2<f64>,
    },
    Linear { bn: BatchNorm, weight: Array2<f64> },
}

impl DegreeEncoder {
    fn table_row(max_out: usize, max_in: usize, d_out: usize, d_in: usize) -> usize {
        d_out.min(max_out) * (max_in + 1) + d_in.min(max_in)
    }
}

/// Sizes and switches of the encoder stack.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderShape {
    pub dim: usize,
    pub node_in: usize,
    pub edge_in: usize,
    /// Walk length; `None` disables RRWP encodings.
    pub rrwp_k: Option<usize>,
    pub degree_mode: DegreeMode,
    pub max_out_degree: usize,
    pub max_in_degree: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

/// RRWP encoder: separate batch normalizers for node diagonals and edge pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct RrwpEncoder {
    pub bn_node: BatchNorm,
    pub w_node: Array2<f64>,
    pub bn_edge: BatchNorm,
    pub w_edge: Array2<f64>,
}

/// Input projections, structural encoders and the added-edge embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w_node_in: Array2<f64>,
    pub b_node_in: Array1<f64>,
    pub w_edge_in: Array2<f64>,
    pub b_edge_in: Array1<f64>,
    /// Input state of every added edge, in place of projected features.
    pub added_edge: Array1<f64>,
    pub rrwp: Option<RrwpEncoder>,
    pub degree: DegreeEncoder,
}

impl EncoderParams {
    pub fn init<R: Rng + ?Sized>(shape: &EncoderShape, rng: &mut R) -> Result<Self> {
        let n = shape.dim;
        if n == 0 {
            return Err(invalid("encoder dimension must be positive"));
        }
        let rrwp = match shape.rrwp_k {
            Some(0) => return Err(invalid("RRWP walk length k must be at least 1")),
            Some(k) => Some(RrwpEncoder {
                bn_node: BatchNorm::new(k, shape.bn_eps, shape.bn_momentum),
                w_node: fan_in_uniform(k, n, 1.0, rng),
                bn_edge: BatchNorm::new(k, shape.bn_eps, shape.bn_momentum),
                w_edge: fan_in_uniform(k, n, 1.0, rng),
            }),
            None => None,
        };
        let (mo, mi) = (shape.max_out_degree, shape.max_in_degree);
        let degree = match shape.degree_mode.resolve(mo, mi) {
            DegreeMode::Linear => DegreeEncoder::Linear {
                bn: BatchNorm::new(2, shape.bn_eps, shape.bn_momentum),
                weight: fan_in_uniform(2, n, 1.0, rng),
            },
            _ => DegreeEncoder::Table {
                max_out: mo,
                max_in: mi,
                table: Array2::from_shape_simple_fn(((mo + 1) * (mi + 1), n), || rng.random_range(-1.0..1.0)),
            },
        };
        Ok(EncoderParams {
            w_node_in: fan_in_uniform(shape.node_in.max(1), n, 1.0, rng)
                .slice_move(ndarray::s![..shape.node_in, ..]),
            b_node_in: Array1::zeros(n),
            w_edge_in: fan_in_uniform(shape.edge_in.max(1), n, 1.0, rng)
                .slice_move(ndarray::s![..shape.edge_in, ..]),
            b_edge_in: Array1::zeros(n),
            added_edge: Array1::from_shape_simple_fn(n, || rng.random_range(-1.0..1.0)),
            rrwp,
            degree,
        })
    }

    pub fn dim(&self) -> usize {
        self.added_edge.len()
    }
}

impl Parameters for EncoderParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        use ParamKind::*;
        view2(out, prefix, "w_node_in", Weight, &self.w_node_in);
        view1(out, prefix, "b_node_in", Bias, &self.b_node_in);
        view2(out, prefix, "w_edge_in", Weight, &self.w_edge_in);
        view1(out, prefix, "b_edge_in", Bias, &self.b_edge_in);
        view1(out, prefix, "added_edge", Embedding, &self.added_edge);
        if let Some(r) = &self.rrwp {
            r.bn_node.visit(&join(prefix, "rrwp_bn_node"), out);
            view2(out, prefix, "rrwp_w_node", Weight, &r.w_node);
            r.bn_edge.visit(&join(prefix, "rrwp_bn_edge"), out);
            view2(out, prefix, "rrwp_w_edge", Weight, &r.w_edge);
        }
        match &self.degree {
            DegreeEncoder::Table { table, .. } => view2(out, prefix, "degree_table", Embedding, table),
            DegreeEncoder::Linear { bn, weight } => {
                bn.visit(&join(prefix, "degree_bn"), out);
                view2(out, prefix, "degree_w", Weight, weight);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        use ParamKind::*;
        view2_mut(out, prefix, "w_node_in", Weight, &mut self.w_node_in);
        view1_mut(out, prefix, "b_node_in", Bias, &mut self.b_node_in);
        view2_mut(out, prefix, "w_edge_in", Weight, &mut self.w_edge_in);
        view1_mut(out, prefix, "b_edge_in", Bias, &mut self.b_edge_in);
        view1_mut(out, prefix, "added_edge", Embedding, &mut self.added_edge);
        if let Some(r) = &mut self.rrwp {
            r.bn_node.visit_mut(&join(prefix, "rrwp_bn_node"), out);
            view2_mut(out, prefix, "rrwp_w_node", Weight, &mut r.w_node);
            r.bn_edge.visit_mut(&join(prefix, "rrwp_bn_edge"), out);
            view2_mut(out, prefix, "rrwp_w_edge", Weight, &mut r.w_edge);
        }
        match &mut self.degree {
            DegreeEncoder::Table { table, .. } => view2_mut(out, prefix, "degree_table", Embedding, table),
            DegreeEncoder::Linear { bn, weight } => {
                bn.visit_mut(&join(prefix, "degree_bn"), out);
                view2_mut(out, prefix, "degree_w", Weight, weight);
            }
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        if let Some(r) = &self.rrwp {
            r.bn_node.visit_buffers(&join(prefix, "rrwp_bn_node"), out);
            r.bn_edge.visit_buffers(&join(prefix, "rrwp_bn_edge"), out);
        }
        if let DegreeEncoder::Linear { bn, .. } = &self.degree {
            bn.visit_buffers(&join(prefix, "degree_bn"), out);
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        if let Some(r) = &mut self.rrwp {
            r.bn_node.visit_buffers_mut(&join(prefix, "rrwp_bn_node"), out);
            r.bn_edge.visit_buffers_mut(&join(prefix, "rrwp_bn_edge"), out);
        }
        if let DegreeEncoder::Linear { bn, .. } = &mut self.degree {
            bn.visit_buffers_mut(&join(prefix, "degree_bn"), out);
        }
    }
}

/// Per-batch inputs of [`apply_encodings`]. Edge rows cover every edge of the
/// rewired graph; feature rows of added edges are ignored.
#[derive(Debug, Clone, Copy)]
pub struct EncoderInputs<'a> {
    pub node_feat: ArrayView2<'a, f64>,
    pub edge_feat: ArrayView2<'a, f64>,
    pub edge_added: &'a [bool],
    pub node_rw: ArrayView2<'a, f64>,
    pub edge_rw: ArrayView2<'a, f64>,
    pub out_degree: &'a [usize],
    pub in_degree: &'a [usize],
}

#[derive(Debug, Clone)]
pub struct EncoderCache {
    bn_node: Option<(BatchNormCache, Array2<f64>)>,
    bn_edge: Option<(BatchNormCache, Array2<f64>)>,
    degree: DegreeCache,
}

#[derive(Debug, Clone)]
enum DegreeCache {
    Table(Vec<usize>),
    Linear(BatchNormCache, Array2<f64>),
}

fn check_shape(what: &str, got: (usize, usize), want: (usize, usize)) -> Result<()> {
    if got != want {
        return Err(invalid(format!("{what} has shape {got:?}, expected {want:?}")));
    }
    Ok(())
}

/// `x⁰ = x^in + x^RW + x^deg` and `e⁰ = e^in + e^RW`, where `e^in` is the
/// added-edge embedding on added edges.
pub fn apply_encodings(
    params: &EncoderParams,
    inputs: &EncoderInputs<'_>,
    mode: Mode,
) -> Result<(Array2<f64>, Array2<f64>, EncoderCache)> {
    let v = inputs.node_feat.nrows();
    let e = inputs.edge_feat.nrows();
    let n = params.dim();
    check_shape("node features", inputs.node_feat.dim(), (v, params.w_node_in.nrows()))?;
    check_shape("edge features", inputs.edge_feat.dim(), (e, params.w_edge_in.nrows()))?;
    if inputs.edge_added.len() != e || inputs.out_degree.len() != v || inputs.in_degree.len() != v {
        return Err(invalid("encoder inputs disagree on node or edge counts"));
    }

    let mut x = inputs.node_feat.dot(&params.w_node_in) + &params.b_node_in;
    let mut ef = inputs.edge_feat.dot(&params.w_edge_in) + &params.b_edge_in;
    for (mut row, &added) in ef.outer_iter_mut().zip(inputs.edge_added) {
        if added {
            row.assign(&params.added_edge);
        }
    }

    let (bn_node, bn_edge) = match &params.rrwp {
        Some(r) => {
            let k = r.w_node.nrows();
            check_shape("node RRWP", inputs.node_rw.dim(), (v, k))?;
            check_shape("edge RRWP", inputs.edge_rw.dim(), (e, k))?;
            let (zn, cn) = r.bn_node.forward(&inputs.node_rw.to_owned(), mode);
            x += &zn.dot(&r.w_node);
            let (ze, ce) = r.bn_edge.forward(&inputs.edge_rw.to_owned(), mode);
            ef += &ze.dot(&r.w_edge);
            (Some((cn, zn)), Some((ce, ze)))
        }
        None => (None, None),
    };

    let degree = match &params.degree {
        DegreeEncoder::Table { max_out, max_in, table } => {
            let rows: Vec<usize> = inputs
                .out_degree
                .iter()
                .zip(inputs.in_degree)
                .map(|(&o, &i)| DegreeEncoder::table_row(*max_out, *max_in, o, i))
                .collect();
            x += &gather_rows(&table.view(), &rows);
            DegreeCache::Table(rows)
        }
        DegreeEncoder::Linear { bn, weight } => {
            let raw = Array2::from_shape_fn((v, 2), |(i, c)| {
                if c == 0 {
                    inputs.out_degree[i] as f64
                } else {
                    inputs.in_degree[i] as f64
                }
            });
            let (z, c) = bn.forward(&raw, mode);
            x += &z.dot(weight);
            DegreeCache::Linear(c, z)
        }
    };
    debug_assert_eq!(x.ncols(), n);
    Ok((x, ef, EncoderCache { bn_node, bn_edge, degree }))
}

/// Accumulates encoder parameter gradients from the gradients of `x⁰`, `e⁰`.
pub fn encodings_backward(
    params: &EncoderParams,
    inputs: &EncoderInputs<'_>,
    cache: &EncoderCache,
    gx: &Array2<f64>,
    ge: &Array2<f64>,
    grad: &mut EncoderParams,
) {
    grad.w_node_in += &inputs.node_feat.t().dot(gx);
    grad.b_node_in += &gx.sum_axis(Axis(0));

    let mut ge_feat = ge.clone();
    for (mut row, &added) in ge_feat.outer_iter_mut().zip(inputs.edge_added) {
        if added {
            grad.added_edge += &row;
            row.fill(0.0);
        }
    }
    grad.w_edge_in += &inputs.edge_feat.t().dot(&ge_feat);
    grad.b_edge_in += &ge_feat.sum_axis(Axis(0));

    if let (Some(r), Some(gr), Some((cn, zn)), Some((ce, ze))) =
        (&params.rrwp, grad.rrwp.as_mut(), &cache.bn_node, &cache.bn_edge)
    {
        gr.w_node += &zn.t().dot(gx);
        r.bn_node.backward(cn, &gx.dot(&r.w_node.t()), &mut gr.bn_node);
        gr.w_edge += &ze.t().dot(ge);
        r.bn_edge.backward(ce, &ge.dot(&r.w_edge.t()), &mut gr.bn_edge);
    }

    match (&params.degree, &mut grad.degree, &cache.degree) {
        (DegreeEncoder::Table { table, .. }, DegreeEncoder::Table { table: gt, .. }, DegreeCache::Table(rows)) => {
            *gt += &scatter_add_rows(&gx.view(), rows, table.nrows());
        }
        (DegreeEncoder::Linear { bn, weight }, DegreeEncoder::Linear { bn: gbn, weight: gw }, DegreeCache::Linear(c, z)) => {
            *gw += &z.t().dot(gx);
            bn.backward(c, &gx.dot(&weight.t()), gbn);
        }
        _ => unreachable!("gradient container does not mirror encoder layout"),
    }
}

/// Applies the running-statistic updates recorded in a train-mode cache.
pub fn commit_encoder_stats(params: &mut EncoderParams, cache: &EncoderCache) {
    if let (Some(r), Some((cn, _)), Some((ce, _))) = (&mut params.rrwp, &cache.bn_node, &cache.bn_edge) {
        r.bn_node.commit(cn);
        r.bn_edge.commit(ce);
    }
    if let (DegreeEncoder::Linear { bn, .. }, DegreeCache::Linear(c, _)) = (&mut params.degree, &cache.degree) {
        bn.commit(c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::rewire::superimpose;
    use ndarray::array;
    use rand::SeedableRng;

    fn undirected(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::build(n, edges, Array2::zeros((n, 1)), Array2::zeros((edges.len(), 1)), false).unwrap()
    }

    #[test]
    fn transition_examples() {
        let t = transition_matrix(&undirected(2, &[(0, 1)]));
        assert_eq!((t.get(0, 0), t.get(0, 1), t.get(1, 0), t.get(1, 1)), (0.0, 1.0, 1.0, 0.0));
        let tri = transition_matrix(&undirected(3, &[(0, 1), (1, 2), (0, 2)]));
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(tri.get(i, j), if i == j { 0.0 } else { 0.5 });
            }
        }
        let single = transition_matrix(&undirected(1, &[]));
        assert!(single.row(0).is_empty());
    }

    #[test]
    fn rrwp_examples() {
        let p = rrwp(&undirected(2, &[(0, 1)]), 2).unwrap();
        assert_eq!(p.diagonal(0), &[0.0, 1.0]);
        assert_eq!(p.diagonal(1), &[0.0, 1.0]);
        assert_eq!(p.pair(0, 1).unwrap(), &[1.0, 0.0]);
        let tri = rrwp(&undirected(3, &[(0, 1), (1, 2), (0, 2)]), 2).unwrap();
        for i in 0..3 {
            assert_eq!(tri.diagonal(i), &[0.0, 0.5]);
        }
        assert!(rrwp(&undirected(2, &[(0, 1)]), 0).is_err());
    }

    #[test]
    fn k1_equals_transition() {
        let g = undirected(5, &[(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (4, 4)]);
        let t = transition_matrix(&g);
        let p = rrwp(&g, 1).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(p.get(1, i, j), t.get(i, j));
            }
        }
    }

    #[test]
    fn sink_rows_stay_empty() {
        let g = Graph::build(3, &[(0, 1)], Array2::zeros((3, 1)), Array2::zeros((1, 1)), true).unwrap();
        let p = rrwp(&g, 3).unwrap();
        assert_eq!(p.step_row(1, 0).collect::<Vec<_>>(), vec![(1, 1.0)]);
        assert_eq!(p.step_row(2, 0).count(), 0);
        assert_eq!(p.step_row(1, 2).count(), 0);
    }

    #[test]
    fn lookup_examples() {
        // path 0-1-2-3 with an added edge between the ends (walk distance 3 > k)
        let g = undirected(4, &[(0, 1), (1, 2), (2, 3)]);
        let p = rrwp(&g, 2).unwrap();
        let h = superimpose(&g, &[(0, 3)]).unwrap();
        let (nr, er) = lookup_encodings(&p, &h).unwrap();
        assert_eq!(nr.dim(), (4, 2));
        assert_eq!(er.row(0), array![1.0, 0.0]);
        assert!(er.row(6).iter().all(|&v| v == 0.0));
        assert!(er.row(7).iter().all(|&v| v == 0.0));
        let other = rrwp(&undirected(3, &[(0, 1)]), 2).unwrap();
        assert!(lookup_encodings(&other, &h).is_err());
    }

    #[test]
    fn degree_table_sums() {
        let g = Graph::build(3, &[(0, 1), (0, 2), (1, 2)], Array2::zeros((3, 1)), Array2::zeros((3, 1)), true).unwrap();
        let d = DegreeTable::of(&g);
        assert_eq!(d.out_degree, vec![2, 1, 0]);
        assert_eq!(d.in_degree, vec![0, 1, 2]);
        assert_eq!(d.max_out(), 2);
        assert_eq!(d.max_in(), 2);
    }

    #[test]
    fn degree_mode_threshold() {
        assert_eq!(DegreeMode::Auto.resolve(4, 4), DegreeMode::Table);
        assert_eq!(DegreeMode::Auto.resolve(63, 63), DegreeMode::Table);
        assert_eq!(DegreeMode::Auto.resolve(64, 63), DegreeMode::Linear);
        assert_eq!(DegreeMode::Linear.resolve(1, 1), DegreeMode::Linear);
    }

    fn shape(mode: DegreeMode) -> EncoderShape {
        EncoderShape {
            dim: 4,
            node_in: 3,
            edge_in: 2,
            rrwp_k: Some(3),
            degree_mode: mode,
            max_out_degree: 3,
            max_in_degree: 3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    struct Fixture {
        nf: Array2<f64>,
        ef: Array2<f64>,
        added: Vec<bool>,
        nrw: Array2<f64>,
        erw: Array2<f64>,
        dout: Vec<usize>,
        din: Vec<usize>,
    }

    impl Fixture {
        fn new(seed: u64) -> Self {
            let mut rng = crate::seed::GrassRng::seed_from_u64(seed);
            let mut u = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random_range(0.0..1.0));
            Fixture {
                nf: u(5, 3),
                ef: u(6, 2),
                added: vec![false, false, false, false, true, true],
                nrw: u(5, 3),
                erw: u(6, 3),
                dout: vec![1, 2, 0, 5, 1],
                din: vec![2, 1, 1, 0, 3],
            }
        }

        fn inputs(&self) -> EncoderInputs<'_> {
            EncoderInputs {
                node_feat: self.nf.view(),
                edge_feat: self.ef.view(),
                edge_added: &self.added,
                node_rw: self.nrw.view(),
                edge_rw: self.erw.view(),
                out_degree: &self.dout,
                in_degree: &self.din,
            }
        }
    }

    #[test]
    fn zero_encoder_passes_input_through() {
        let f = Fixture::new(1);
        let mut rng = crate::seed::GrassRng::seed_from_u64(0);
        let mut p = EncoderParams::init(&shape(DegreeMode::Table), &mut rng).unwrap();
        let w = p.w_node_in.clone();
        p.zero();
        p.w_node_in = w.clone();
        let (x, e, _) = apply_encodings(&p, &f.inputs(), Mode::Train).unwrap();
        assert_eq!(x, f.nf.dot(&w));
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn added_edges_get_embedding_plus_rrwp() {
        let f = Fixture::new(2);
        let mut rng = crate::seed::GrassRng::seed_from_u64(0);
        let p = EncoderParams::init(&shape(DegreeMode::Table), &mut rng).unwrap();
        let (_, e, _) = apply_encodings(&p, &f.inputs(), Mode::Eval).unwrap();
        let r = p.rrwp.as_ref().unwrap();
        let (z, _) = r.bn_edge.forward(&f.erw, Mode::Eval);
        let want = &p.added_edge + &z.row(5).dot(&r.w_edge);
        for c in 0..4 {
            assert!((e[[5, c]] - want[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn eval_is_repeatable() {
        let f = Fixture::new(3);
        let mut rng = crate::seed::GrassRng::seed_from_u64(0);
        let p = EncoderParams::init(&shape(DegreeMode::Linear), &mut rng).unwrap();
        let a = apply_encodings(&p, &f.inputs(), Mode::Eval).unwrap();
        let b = apply_encodings(&p, &f.inputs(), Mode::Eval).unwrap();
        assert_eq!((a.0, a.1), (b.0, b.1));
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let f = Fixture::new(4);
        let mut rng = crate::seed::GrassRng::seed_from_u64(0);
        let p = EncoderParams::init(&shape(DegreeMode::Table), &mut rng).unwrap();
        let bad = Array2::zeros((5, 7));
        let inputs = EncoderInputs {
            node_rw: bad.view(),
            ..f.inputs()
        };
        assert!(apply_encodings(&p, &inputs, Mode::Train).is_err());
    }

    #[test]
    fn encoder_gradient_matches_finite_differences() {
        for mode in [DegreeMode::Table, DegreeMode::Linear] {
            let f = Fixture::new(5);
            let mut rng = crate::seed::GrassRng::seed_from_u64(9);
            let p = EncoderParams::init(&shape(mode), &mut rng).unwrap();
            let rx = Array2::from_shape_simple_fn((5, 4), || rng.random_range(-1.0..1.0));
            let re = Array2::from_shape_simple_fn((6, 4), || rng.random_range(-1.0..1.0));
            let loss = |q: &EncoderParams| {
                let (x, e, _) = apply_encodings(q, &f.inputs(), Mode::Train).unwrap();
                (&x * &rx).sum() + (&e * &re).sum()
            };
            let (_, _, cache) = apply_encodings(&p, &f.inputs(), Mode::Train).unwrap();
            let mut grad = p.clone();
            grad.zero();
            encodings_backward(&p, &f.inputs(), &cache, &rx, &re, &mut grad);
            let analytic: Vec<f64> = grad.params().iter().flat_map(|v| v.data.to_vec()).collect();
            let h = 1e-6;
            for k in 0..analytic.len() {
                let bump = |delta: f64| {
                    let mut q = p.clone();
                    let mut seen = 0;
                    for v in q.params_mut() {
                        if k < seen + v.data.len() {
                            v.data[k - seen] += delta;
                            break;
                        }
                        seen += v.data.len();
                    }
                    loss(&q)
                };
                let numeric = (bump(h) - bump(-h)) / (2.0 * h);
                let err = (analytic[k] - numeric).abs() / analytic[k].abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{mode:?} param {k}: {} vs {numeric}", analytic[k]);
            }
        }
    }
}
