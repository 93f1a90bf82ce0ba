//! One attention layer: degree-scaled additive attention over in-edges,
//! an unattended three-term edge update, feed-forward blocks, and a
//! DeepNorm-scaled residual followed by normalization.
//!
//! For a directed edge `(i, j)` of the current orientation, with node states
//! `x` and edge states `e`:
//!
//! ```text
//! s_ij  = keep_ij ⊙ d⁻(j) · exp(W_attn e_ij)
//! a_ij  = s_ij / (Σ_{h→j} s_hj + ε)
//! x̃_j   = W_tt x_j + Σ_{i→j} a_ij ⊙ (W_th x_i + W_te e_ij)
//! ẽ_ij  = W_ee e_ij + W_eh x_i + W_et x_j
//! x̂_j   = W_no φ(x̃_j + b_na) + b_no
//! ê_ji  = W_eo φ(ẽ_ij + b_ea) + b_eo
//! x'    = Norm(x + α x̂),   e' = Norm(e + α ê)
//! ```
//!
//! Edge states are stored by edge index; the edge output `ê_ji` stays in the
//! slot of edge `(i, j)` and the next layer reads that slot with the reversed
//! orientation (see [`AttentionTopology::flipped`]).

use std::collections::BTreeSet;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::norm::{Mode, Norm, NormCache, NormKind};
use super::ops::{gather_rows, scatter_add_rows, Activation};
use super::param::{fan_in_uniform, view1, view1_mut, view2, view2_mut, ParamKind, ParamView, ParamViewMut, Parameters};
use crate::error::{GrassError, Result};

/// `α = (2L)^{1/4}`, the residual scale for an `L`-layer stack.
pub fn deepnorm_alpha(num_layers: usize) -> f64 {
    (2.0 * num_layers as f64).powf(0.25)
}

/// `β = (8L)^{-1/4}`, the initialization gain of output projections.
pub fn deepnorm_beta(num_layers: usize) -> f64 {
    (8.0 * num_layers as f64).powf(-0.25)
}

/// Attention hyperparameters shared by every layer of a model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionSettings {
    pub activation: Activation,
    /// Added to the attention denominator.
    pub eps: f64,
    /// Attention logits are clamped to at most this value before `exp`.
    pub logit_clamp: f64,
    /// Multiply logits by `ln d⁻(j)` instead of multiplying `exp` by `d⁻(j)`.
    pub log_length_scaling: bool,
}

/// Edge list of one layer orientation with per-node in-degrees.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTopology {
    num_nodes: usize,
    src: Vec<usize>,
    dst: Vec<usize>,
    in_degree: Vec<usize>,
}

impl AttentionTopology {
    pub fn new(num_nodes: usize, src: Vec<usize>, dst: Vec<usize>) -> Self {
        assert_eq!(src.len(), dst.len());
        let mut in_degree = vec![0; num_nodes];
        for &t in &dst {
            in_degree[t] += 1;
        }
        AttentionTopology {
            num_nodes,
            src,
            dst,
            in_degree,
        }
    }

    pub fn from_edges(num_nodes: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let (src, dst) = edges.into_iter().unzip();
        Self::new(num_nodes, src, dst)
    }

    /// Every edge reversed; edge indices are unchanged.
    pub fn flipped(&self) -> Self {
        Self::new(self.num_nodes, self.dst.clone(), self.src.clone())
    }

    /// Orientation used by layer `layer` (1-based): the rewired graph's own
    /// direction on odd layers, reversed on even layers when flipping is on.
    pub fn for_layer(base: &AttentionTopology, layer: usize, flip: bool) -> AttentionTopology {
        if flip && layer % 2 == 0 {
            base.flipped()
        } else {
            base.clone()
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    pub fn heads(&self) -> &[usize] {
        &self.src
    }

    pub fn tails(&self) -> &[usize] {
        &self.dst
    }

    pub fn edge(&self, idx: usize) -> (usize, usize) {
        (self.src[idx], self.dst[idx])
    }

    pub fn in_degree(&self) -> &[usize] {
        &self.in_degree
    }

    /// Edge indices entering each node.
    pub fn in_edge_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.num_nodes];
        for (idx, &t) in self.dst.iter().enumerate() {
            lists[t].push(idx);
        }
        lists
    }
}

/// Per-edge, per-channel keep flags for DropKey.
#[derive(Debug, Clone, PartialEq)]
pub struct DropKeyMask {
    pub rate: f64,
    /// `None` keeps everything (eval mode or rate 0).
    pub keep: Option<Array2<f64>>,
}

impl DropKeyMask {
    pub fn keep_all() -> Self {
        DropKeyMask { rate: 0.0, keep: None }
    }

    /// Each edge-channel is kept with probability `1 - rate`. No rescaling.
    pub fn sample<R: Rng + ?Sized>(num_edges: usize, dim: usize, rate: f64, mode: Mode, rng: &mut R) -> Self {
        if mode == Mode::Eval || rate <= 0.0 {
            return DropKeyMask { rate, keep: None };
        }
        let keep = Array2::from_shape_simple_fn((num_edges, dim), || {
            if rng.random::<f64>() < rate {
                0.0
            } else {
                1.0
            }
        });
        DropKeyMask { rate, keep: Some(keep) }
    }

    pub fn is_kept(&self, edge: usize, channel: usize) -> bool {
        self.keep.as_ref().is_none_or(|k| k[[edge, channel]] != 0.0)
    }
}

/// The set of ordered pairs `(i, j)` along which at least one channel carries
/// a message: the rewired adjacency AND the DropKey keep mask.
pub fn message_adjacency(topo: &AttentionTopology, mask: &DropKeyMask, dim: usize) -> BTreeSet<(usize, usize)> {
    (0..topo.num_edges())
        .filter(|&e| (0..dim).any(|c| mask.is_kept(e, c)))
        .map(|e| topo.edge(e))
        .collect()
}

/// Trainable tensors of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub w_attn: Array2<f64>,
    pub w_tail_tail: Array2<f64>,
    pub w_tail_head: Array2<f64>,
    pub w_tail_edge: Array2<f64>,
    pub w_edge_edge: Array2<f64>,
    pub w_edge_head: Array2<f64>,
    pub w_edge_tail: Array2<f64>,
    pub w_node_out: Array2<f64>,
    pub w_edge_out: Array2<f64>,
    pub b_node_act: Array1<f64>,
    pub b_node_out: Array1<f64>,
    pub b_edge_act: Array1<f64>,
    pub b_edge_out: Array1<f64>,
    pub norm_node: Norm,
    pub norm_edge: Norm,
}

impl LayerParams {
    pub fn zeros(dim: usize, norm: NormKind, norm_eps: f64, norm_momentum: f64) -> Self {
        let m = || Array2::zeros((dim, dim));
        let v = || Array1::zeros(dim);
        LayerParams {
            w_attn: m(),
            w_tail_tail: m(),
            w_tail_head: m(),
            w_tail_edge: m(),
            w_edge_edge: m(),
            w_edge_head: m(),
            w_edge_tail: m(),
            w_node_out: m(),
            w_edge_out: m(),
            b_node_act: v(),
            b_node_out: v(),
            b_edge_act: v(),
            b_edge_out: v(),
            norm_node: Norm::new(norm, dim, norm_eps, norm_momentum),
            norm_edge: Norm::new(norm, dim, norm_eps, norm_momentum),
        }
    }

    /// Fan-in uniform weights, output projections scaled by `out_gain`,
    /// zero biases and unit gains.
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        norm: NormKind,
        norm_eps: f64,
        norm_momentum: f64,
        out_gain: f64,
        rng: &mut R,
    ) -> Self {
        let mut p = Self::zeros(dim, norm, norm_eps, norm_momentum);
        for w in [
            &mut p.w_attn,
            &mut p.w_tail_tail,
            &mut p.w_tail_head,
            &mut p.w_tail_edge,
            &mut p.w_edge_edge,
            &mut p.w_edge_head,
            &mut p.w_edge_tail,
        ] {
            *w = fan_in_uniform(dim, dim, 1.0, rng);
        }
        p.w_node_out = fan_in_uniform(dim, dim, out_gain, rng);
        p.w_edge_out = fan_in_uniform(dim, dim, out_gain, rng);
        p
    }

    pub fn dim(&self) -> usize {
        self.w_attn.nrows()
    }
}

impl Parameters for LayerParams {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        use ParamKind::*;
        view2(out, prefix, "w_attn", Weight, &self.w_attn);
        view2(out, prefix, "w_tail_tail", Weight, &self.w_tail_tail);
        view2(out, prefix, "w_tail_head", Weight, &self.w_tail_head);
        view2(out, prefix, "w_tail_edge", Weight, &self.w_tail_edge);
        view2(out, prefix, "w_edge_edge", Weight, &self.w_edge_edge);
        view2(out, prefix, "w_edge_head", Weight, &self.w_edge_head);
        view2(out, prefix, "w_edge_tail", Weight, &self.w_edge_tail);
        view2(out, prefix, "w_node_out", Weight, &self.w_node_out);
        view2(out, prefix, "w_edge_out", Weight, &self.w_edge_out);
        view1(out, prefix, "b_node_act", Bias, &self.b_node_act);
        view1(out, prefix, "b_node_out", Bias, &self.b_node_out);
        view1(out, prefix, "b_edge_act", Bias, &self.b_edge_act);
        view1(out, prefix, "b_edge_out", Bias, &self.b_edge_out);
        self.norm_node.visit(&super::param::join(prefix, "norm_node"), out);
        self.norm_edge.visit(&super::param::join(prefix, "norm_edge"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        use ParamKind::*;
        view2_mut(out, prefix, "w_attn", Weight, &mut self.w_attn);
        view2_mut(out, prefix, "w_tail_tail", Weight, &mut self.w_tail_tail);
        view2_mut(out, prefix, "w_tail_head", Weight, &mut self.w_tail_head);
        view2_mut(out, prefix, "w_tail_edge", Weight, &mut self.w_tail_edge);
        view2_mut(out, prefix, "w_edge_edge", Weight, &mut self.w_edge_edge);
        view2_mut(out, prefix, "w_edge_head", Weight, &mut self.w_edge_head);
        view2_mut(out, prefix, "w_edge_tail", Weight, &mut self.w_edge_tail);
        view2_mut(out, prefix, "w_node_out", Weight, &mut self.w_node_out);
        view2_mut(out, prefix, "w_edge_out", Weight, &mut self.w_edge_out);
        view1_mut(out, prefix, "b_node_act", Bias, &mut self.b_node_act);
        view1_mut(out, prefix, "b_node_out", Bias, &mut self.b_node_out);
        view1_mut(out, prefix, "b_edge_act", Bias, &mut self.b_edge_act);
        view1_mut(out, prefix, "b_edge_out", Bias, &mut self.b_edge_out);
        self.norm_node.visit_mut(&super::param::join(prefix, "norm_node"), out);
        self.norm_edge.visit_mut(&super::param::join(prefix, "norm_edge"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.norm_node.visit_buffers(&super::param::join(prefix, "norm_node"), out);
        self.norm_edge.visit_buffers(&super::param::join(prefix, "norm_edge"), out);
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.norm_node.visit_buffers_mut(&super::param::join(prefix, "norm_node"), out);
        self.norm_edge.visit_buffers_mut(&super::param::join(prefix, "norm_edge"), out);
    }
}

/// Attention scores `s` and the unclamped logits they came from.
pub fn attention_scores(
    params: &LayerParams,
    edge_feats: &ArrayView2<f64>,
    topo: &AttentionTopology,
    mask: &DropKeyMask,
    settings: &AttentionSettings,
    layer: usize,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if !edge_feats.iter().all(|v| v.is_finite()) {
        return Err(GrassError::Numeric {
            layer,
            message: "non-finite edge state entering attention".into(),
        });
    }
    let logits = edge_feats.dot(&params.w_attn);
    let clamp = settings.logit_clamp;
    let mut s = logits.mapv(|z| z.min(clamp));
    for (mut row, &t) in s.outer_iter_mut().zip(topo.tails()) {
        let d = topo.in_degree[t] as f64;
        if settings.log_length_scaling {
            let scale = d.ln();
            row.mapv_inplace(|z| (scale * z).exp());
        } else {
            row.mapv_inplace(|z| d * z.exp());
        }
    }
    if let Some(keep) = &mask.keep {
        s *= keep;
    }
    Ok((s, logits))
}

/// Normalizes scores over each tail's in-edges, per channel. Returns the
/// weights and the per-node denominators `Σ s + ε`.
pub fn attention_weights(s: &Array2<f64>, topo: &AttentionTopology, eps: f64) -> (Array2<f64>, Array2<f64>) {
    let mut denom = scatter_add_rows(&s.view(), topo.tails(), topo.num_nodes());
    denom += eps;
    let mut a = s.clone();
    for (mut row, &t) in a.outer_iter_mut().zip(topo.tails()) {
        row /= &denom.row(t);
    }
    (a, denom)
}

/// Intermediate values of [`aggregate`] needed by the backward pass.
#[derive(Debug, Clone)]
pub struct AggregateCache {
    /// `W_th x_i + W_te e_ij` per edge.
    values: Array2<f64>,
}

/// Attention-weighted node update and three-term edge update.
pub fn aggregate(
    params: &LayerParams,
    x: &ArrayView2<f64>,
    e: &ArrayView2<f64>,
    a: &Array2<f64>,
    topo: &AttentionTopology,
) -> (Array2<f64>, Array2<f64>, AggregateCache) {
    let n = topo.num_nodes();
    let head_proj = x.dot(&params.w_tail_head);
    let mut values = gather_rows(&head_proj.view(), topo.heads());
    values += &e.dot(&params.w_tail_edge);
    let messages = a * &values;
    let mut x_tilde = x.dot(&params.w_tail_tail);
    x_tilde += &scatter_add_rows(&messages.view(), topo.tails(), n);

    let mut e_tilde = e.dot(&params.w_edge_edge);
    e_tilde += &gather_rows(&x.dot(&params.w_edge_head).view(), topo.heads());
    e_tilde += &gather_rows(&x.dot(&params.w_edge_tail).view(), topo.tails());
    (x_tilde, e_tilde, AggregateCache { values })
}

/// Feed-forward blocks. The returned edge rows are the flipped-orientation
/// outputs `ê_ji`, kept in the slot of edge `(i, j)`.
pub fn ffn(
    params: &LayerParams,
    x_tilde: &Array2<f64>,
    e_tilde: &Array2<f64>,
    act: Activation,
) -> (Array2<f64>, Array2<f64>, FfnCache) {
    let pre_x = x_tilde + &params.b_node_act;
    let pre_e = e_tilde + &params.b_edge_act;
    let fx = act.forward(&pre_x);
    let fe = act.forward(&pre_e);
    let x_hat = fx.dot(&params.w_node_out) + &params.b_node_out;
    let e_hat = fe.dot(&params.w_edge_out) + &params.b_edge_out;
    (x_hat, e_hat, FfnCache { pre_x, pre_e, fx, fe })
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    pre_x: Array2<f64>,
    pre_e: Array2<f64>,
    fx: Array2<f64>,
    fe: Array2<f64>,
}

/// Everything the backward pass of one layer needs.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub topo: AttentionTopology,
    mask: DropKeyMask,
    x: Array2<f64>,
    e: Array2<f64>,
    logits: Array2<f64>,
    s: Array2<f64>,
    a: Array2<f64>,
    denom: Array2<f64>,
    agg: AggregateCache,
    ffn: FfnCache,
    pub norm_node: NormCache,
    pub norm_edge: NormCache,
}

/// Full layer forward pass.
#[allow(clippy::too_many_arguments)]
pub fn layer_forward(
    params: &LayerParams,
    x: &Array2<f64>,
    e: &Array2<f64>,
    topo: &AttentionTopology,
    settings: &AttentionSettings,
    alpha: f64,
    mask: &DropKeyMask,
    mode: Mode,
    layer: usize,
) -> Result<(Array2<f64>, Array2<f64>, LayerCache)> {
    let (s, logits) = attention_scores(params, &e.view(), topo, mask, settings, layer)?;
    let (a, denom) = attention_weights(&s, topo, settings.eps);
    let (x_tilde, e_tilde, agg) = aggregate(params, &x.view(), &e.view(), &a, topo);
    let (x_hat, e_hat, ffn_cache) = ffn(params, &x_tilde, &e_tilde, settings.activation);

    let res_x = x + &(x_hat * alpha);
    let res_e = e + &(e_hat * alpha);
    let (x_out, norm_node) = params.norm_node.forward(&res_x, mode);
    let (e_out, norm_edge) = params.norm_edge.forward(&res_e, mode);
    if !x_out.iter().chain(e_out.iter()).all(|v| v.is_finite()) {
        return Err(GrassError::Numeric {
            layer,
            message: "non-finite layer output".into(),
        });
    }
    Ok((
        x_out,
        e_out,
        LayerCache {
            topo: topo.clone(),
            mask: mask.clone(),
            x: x.clone(),
            e: e.clone(),
            logits,
            s,
            a,
            denom,
            agg,
            ffn: ffn_cache,
            norm_node,
            norm_edge,
        },
    ))
}

/// Backward pass of [`layer_forward`]. Parameter gradients are accumulated
/// into `grad`; returns gradients with respect to the layer inputs.
pub fn layer_backward(
    params: &LayerParams,
    cache: &LayerCache,
    settings: &AttentionSettings,
    alpha: f64,
    g_x_out: &Array2<f64>,
    g_e_out: &Array2<f64>,
    grad: &mut LayerParams,
) -> (Array2<f64>, Array2<f64>) {
    let topo = &cache.topo;
    let n = topo.num_nodes();
    let x = &cache.x;
    let e = &cache.e;
    let act = settings.activation;

    let g_res_x = params.norm_node.backward(&cache.norm_node, g_x_out, &mut grad.norm_node);
    let g_res_e = params.norm_edge.backward(&cache.norm_edge, g_e_out, &mut grad.norm_edge);
    let mut gx = g_res_x.clone();
    let mut ge = g_res_e.clone();
    let g_x_hat = g_res_x * alpha;
    let g_e_hat = g_res_e * alpha;

    // feed-forward
    grad.w_node_out += &cache.ffn.fx.t().dot(&g_x_hat);
    grad.b_node_out += &g_x_hat.sum_axis(Axis(0));
    let g_pre_x = act.backward(&cache.ffn.pre_x, &g_x_hat.dot(&params.w_node_out.t()));
    grad.b_node_act += &g_pre_x.sum_axis(Axis(0));
    let g_x_tilde = g_pre_x;

    grad.w_edge_out += &cache.ffn.fe.t().dot(&g_e_hat);
    grad.b_edge_out += &g_e_hat.sum_axis(Axis(0));
    let g_pre_e = act.backward(&cache.ffn.pre_e, &g_e_hat.dot(&params.w_edge_out.t()));
    grad.b_edge_act += &g_pre_e.sum_axis(Axis(0));
    let g_e_tilde = g_pre_e;

    // edge update
    grad.w_edge_edge += &e.t().dot(&g_e_tilde);
    ge += &g_e_tilde.dot(&params.w_edge_edge.t());
    let g_head_side = scatter_add_rows(&g_e_tilde.view(), topo.heads(), n);
    grad.w_edge_head += &x.t().dot(&g_head_side);
    gx += &g_head_side.dot(&params.w_edge_head.t());
    let g_tail_side = scatter_add_rows(&g_e_tilde.view(), topo.tails(), n);
    grad.w_edge_tail += &x.t().dot(&g_tail_side);
    gx += &g_tail_side.dot(&params.w_edge_tail.t());

    // node update
    grad.w_tail_tail += &x.t().dot(&g_x_tilde);
    gx += &g_x_tilde.dot(&params.w_tail_tail.t());
    let g_msg = gather_rows(&g_x_tilde.view(), topo.tails());
    let g_a = &g_msg * &cache.agg.values;
    let g_values = &g_msg * &cache.a;
    grad.w_tail_edge += &e.t().dot(&g_values);
    ge += &g_values.dot(&params.w_tail_edge.t());
    let g_head_proj = scatter_add_rows(&g_values.view(), topo.heads(), n);
    grad.w_tail_head += &x.t().dot(&g_head_proj);
    gx += &g_head_proj.dot(&params.w_tail_head.t());

    // normalization: ds_e = (ga_e - Σ_{e'→j} ga_e' a_e') / D_j
    let ga_a = &g_a * &cache.a;
    let totals = scatter_add_rows(&ga_a.view(), topo.tails(), n);
    let mut g_s = g_a;
    for (idx, mut row) in g_s.outer_iter_mut().enumerate() {
        let t = topo.tails()[idx];
        Zip::from(&mut row)
            .and(&totals.row(t))
            .and(&cache.denom.row(t))
            .for_each(|g, &tot, &d| *g = (*g - tot) / d);
    }

    // scores: ds/dz = s (times ln d⁻ in the log-length variant), 0 where clamped
    let mut g_logits = g_s * &cache.s;
    for (idx, mut row) in g_logits.outer_iter_mut().enumerate() {
        if settings.log_length_scaling {
            let scale = (topo.in_degree()[topo.tails()[idx]] as f64).ln();
            row *= scale;
        }
        Zip::from(&mut row)
            .and(&cache.logits.row(idx))
            .for_each(|g, &z| {
                if z > settings.logit_clamp {
                    *g = 0.0;
                }
            });
    }
    let _ = &cache.mask;
    grad.w_attn += &e.t().dot(&g_logits);
    ge += &g_logits.dot(&params.w_attn.t());
    (gx, ge)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn settings() -> AttentionSettings {
        AttentionSettings {
            activation: Activation::Silu,
            eps: 1e-5,
            logit_clamp: 40.0,
            log_length_scaling: false,
        }
    }

    fn identity_params(dim: usize) -> LayerParams {
        let mut p = LayerParams::zeros(dim, NormKind::Pnv, 1e-5, 0.1);
        for w in [
            &mut p.w_tail_tail,
            &mut p.w_tail_head,
            &mut p.w_tail_edge,
            &mut p.w_edge_edge,
            &mut p.w_edge_head,
            &mut p.w_edge_tail,
        ] {
            *w = Array2::eye(dim);
        }
        p
    }

    #[test]
    fn deepnorm_values() {
        assert!((deepnorm_alpha(49) - 98f64.powf(0.25)).abs() < 1e-12);
        assert!((deepnorm_alpha(49) - 3.1464).abs() < 1e-4);
        assert!((deepnorm_alpha(1) - 1.1892).abs() < 1e-4);
        assert!((1..100).all(|l| deepnorm_alpha(l + 1) >= deepnorm_alpha(l)));
    }

    #[test]
    fn zero_weight_scores_are_degree() {
        let p = LayerParams::zeros(3, NormKind::Pnv, 1e-5, 0.1);
        let topo = AttentionTopology::from_edges(2, [(0, 1)]);
        let e = Array2::from_elem((1, 3), 0.7);
        let (s, _) = attention_scores(&p, &e.view(), &topo, &DropKeyMask::keep_all(), &settings(), 1).unwrap();
        assert_eq!(s, Array2::<f64>::ones((1, 3)));

        let topo4 = AttentionTopology::from_edges(5, [(0, 4), (1, 4), (2, 4), (3, 4)]);
        let (s4, _) = attention_scores(&p, &Array2::zeros((4, 3)).view(), &topo4, &DropKeyMask::keep_all(), &settings(), 1)
            .unwrap();
        assert!(s4.iter().all(|&v| v == 4.0));
    }

    #[test]
    fn dropped_channel_score_is_zero() {
        let p = LayerParams::zeros(2, NormKind::Pnv, 1e-5, 0.1);
        let topo = AttentionTopology::from_edges(2, [(0, 1)]);
        let mask = DropKeyMask {
            rate: 0.5,
            keep: Some(array![[1.0, 0.0]]),
        };
        let (s, _) = attention_scores(&p, &Array2::zeros((1, 2)).view(), &topo, &mask, &settings(), 1).unwrap();
        assert_eq!(s, array![[1.0, 0.0]]);
    }

    #[test]
    fn non_finite_edge_state_reports_layer() {
        let p = LayerParams::zeros(1, NormKind::Pnv, 1e-5, 0.1);
        let topo = AttentionTopology::from_edges(2, [(0, 1)]);
        let err = attention_scores(&p, &array![[f64::NAN]].view(), &topo, &DropKeyMask::keep_all(), &settings(), 7)
            .unwrap_err();
        assert!(matches!(err, GrassError::Numeric { layer: 7, .. }));
    }

    #[test]
    fn weights_self_normalize() {
        let topo = AttentionTopology::from_edges(2, [(0, 1)]);
        let (a, _) = attention_weights(&array![[3.0]], &topo, 0.0);
        assert_eq!(a, array![[1.0]]);

        let topo = AttentionTopology::from_edges(3, [(0, 2), (1, 2)]);
        let (a, _) = attention_weights(&array![[2.0], [2.0]], &topo, 0.0);
        assert_eq!(a, array![[0.5], [0.5]]);

        let (a, _) = attention_weights(&array![[0.0], [0.0]], &topo, 1e-5);
        assert_eq!(a, array![[0.0], [0.0]]);
    }

    #[test]
    fn identity_aggregation() {
        let p = identity_params(2);
        let topo = AttentionTopology::from_edges(2, [(0, 1)]);
        let x = array![[1.0, 2.0], [10.0, 20.0]];
        let e = Array2::zeros((1, 2));
        let (xt, et, _) = aggregate(&p, &x.view(), &e.view(), &array![[1.0, 1.0]], &topo);
        assert_eq!(xt.row(1), array![11.0, 22.0]);
        assert_eq!(xt.row(0), array![1.0, 2.0]);
        assert_eq!(et.row(0), array![11.0, 22.0]);

        let (xt0, _, _) = aggregate(&p, &x.view(), &e.view(), &array![[0.0, 0.0]], &topo);
        assert_eq!(xt0, x);

        let e2 = array![[3.0, -1.0]];
        let (_, et2, _) = aggregate(&p, &Array2::zeros((2, 2)).view(), &e2.view(), &array![[1.0, 1.0]], &topo);
        assert_eq!(et2, e2);
    }

    #[test]
    fn ffn_at_negated_bias_returns_output_bias() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut p = LayerParams::init(3, NormKind::Pnv, 1e-5, 0.1, 1.0, &mut rng);
        p.b_node_act = array![0.3, -0.2, 1.0];
        p.b_node_out = array![5.0, 6.0, 7.0];
        let xt = Array2::from_shape_fn((2, 3), |(_, c)| -p.b_node_act[c]);
        let (xh, _, _) = ffn(&p, &xt, &Array2::zeros((0, 3)), Activation::Silu);
        for row in xh.outer_iter() {
            assert_eq!(row, p.b_node_out);
        }
    }

    #[test]
    fn ffn_relu_is_linear_on_positive_inputs() {
        let mut p = LayerParams::zeros(2, NormKind::Pnv, 1e-5, 0.1);
        p.w_edge_out = Array2::eye(2);
        let et = array![[0.5, 2.0]];
        let (_, eh, _) = ffn(&p, &Array2::zeros((0, 2)), &et, Activation::Relu);
        assert_eq!(eh, et);
    }

    #[test]
    fn flip_twice_is_identity() {
        let topo = AttentionTopology::from_edges(3, [(0, 1), (1, 2), (2, 2)]);
        assert_eq!(topo.flipped().flipped(), topo);
        assert_eq!(AttentionTopology::for_layer(&topo, 1, true), topo);
        assert_eq!(AttentionTopology::for_layer(&topo, 2, true).edge(0), (1, 0));
        assert_eq!(AttentionTopology::for_layer(&topo, 2, false), topo);
    }

    #[test]
    fn zero_params_give_normalized_residual() {
        let p = LayerParams::zeros(2, NormKind::Pnv, 1e-5, 0.1);
        let topo = AttentionTopology::from_edges(3, [(0, 1), (1, 2)]);
        let x = array![[1.0, 2.0], [3.0, -1.0], [0.5, 0.5]];
        let e = array![[1.0, 0.0], [0.0, 2.0]];
        let (xo, _, _) =
            layer_forward(&p, &x, &e, &topo, &settings(), 1.5, &DropKeyMask::keep_all(), Mode::Train, 1).unwrap();
        // each channel of the output is the input channel divided by its RMS
        for c in 0..2 {
            let rms = (x.column(c).mapv(|v| v * v).sum() / 3.0).sqrt();
            for i in 0..3 {
                assert!((xo[[i, c]] - x[[i, c]] / rms).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dropkey_eval_keeps_everything() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let m = DropKeyMask::sample(10, 4, 0.5, Mode::Eval, &mut rng);
        assert!(m.keep.is_none());
        let m = DropKeyMask::sample(1000, 4, 0.3, Mode::Train, &mut rng);
        let kept = m.keep.unwrap().sum() / 4000.0;
        assert!((kept - 0.7).abs() < 0.03);
    }

    fn loss_of(
        p: &LayerParams,
        x: &Array2<f64>,
        e: &Array2<f64>,
        topo: &AttentionTopology,
        st: &AttentionSettings,
        mask: &DropKeyMask,
        rx: &Array2<f64>,
        re: &Array2<f64>,
    ) -> f64 {
        let (xo, eo, _) = layer_forward(p, x, e, topo, st, 1.3, mask, Mode::Train, 1).unwrap();
        (&xo * rx).sum() + (&eo * re).sum()
    }

    #[test]
    fn layer_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let dim = 3;
        for (kind, log_len) in [(NormKind::Pnv, false), (NormKind::Layer, true)] {
            let mut p = LayerParams::init(dim, kind, 1e-5, 0.1, 0.7, &mut rng);
            for b in [&mut p.b_node_act, &mut p.b_node_out, &mut p.b_edge_act, &mut p.b_edge_out] {
                *b = super::super::param::uniform_vec(dim, 0.5, &mut rng);
            }
            let st = AttentionSettings {
                log_length_scaling: log_len,
                ..settings()
            };
            let topo = AttentionTopology::from_edges(5, [(0, 1), (1, 0), (1, 2), (2, 1), (3, 1), (4, 0), (2, 4), (0, 1)]);
            let mask = DropKeyMask::sample(topo.num_edges(), dim, 0.2, Mode::Train, &mut rng);
            let u = |r, c, rng: &mut rand_chacha::ChaCha8Rng| Array2::from_shape_simple_fn((r, c), || rng.random_range(-1.0..1.0));
            let x = u(5, dim, &mut rng);
            let e = u(topo.num_edges(), dim, &mut rng);
            let rx = u(5, dim, &mut rng);
            let re = u(topo.num_edges(), dim, &mut rng);

            let (_, _, cache) = layer_forward(&p, &x, &e, &topo, &st, 1.3, &mask, Mode::Train, 1).unwrap();
            let mut grad = p.clone();
            grad.zero();
            let (gx, ge) = layer_backward(&p, &cache, &st, 1.3, &rx, &re, &mut grad);

            let h = 1e-6;
            let check = |analytic: f64, plus: f64, minus: f64, what: &str| {
                let numeric = (plus - minus) / (2.0 * h);
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                assert!(err < 1e-5, "{what}: analytic {analytic} numeric {numeric}");
            };
            let analytic: Vec<f64> = grad.params().iter().flat_map(|v| v.data.to_vec()).collect();
            let n = analytic.len();
            for k in 0..n {
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
                    loss_of(&q, &x, &e, &topo, &st, &mask, &rx, &re)
                };
                check(analytic[k], bump(h), bump(-h), &format!("param {k}"));
            }
            for (input_is_x, g) in [(true, &gx), (false, &ge)] {
                for idx in ndarray::indices(g.dim()) {
                    let bump = |delta: f64| {
                        let (mut x2, mut e2) = (x.clone(), e.clone());
                        if input_is_x {
                            x2[idx] += delta;
                        } else {
                            e2[idx] += delta;
                        }
                        loss_of(&p, &x2, &e2, &topo, &st, &mask, &rx, &re)
                    };
                    check(g[idx], bump(h), bump(-h), &format!("input {input_is_x} {idx:?}"));
                }
            }
        }
    }
}
