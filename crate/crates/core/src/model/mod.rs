//! The full network: encoders, a stack of attention layers with alternating
//! edge orientation, three-way pooling and a task head.

pub mod batch;
pub mod checkpoint;

pub use batch::{BatchItem, PreparedBatch};

use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::config::{GrassConfig, PoolKind};
use crate::encode::{
    apply_encodings, commit_encoder_stats, encodings_backward, EncoderCache, EncoderInputs, EncoderParams,
    EncoderShape,
};
use crate::error::{invalid, Result};
use crate::nn::ops::scatter_add_rows;
use crate::nn::param::{fan_in_uniform, join, view1, view1_mut, view2, view2_mut, ParamKind, ParamView, ParamViewMut};
use crate::nn::{
    deepnorm_alpha, deepnorm_beta, layer_backward, layer_forward, Activation, AttentionSettings, AttentionTopology,
    DropKeyMask, LayerCache, LayerParams, Mode, Parameters,
};

/// Task head: optional hidden layer, then an affine output.
#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub hidden: Option<(Array2<f64>, Array1<f64>)>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Head {
    fn init<R: Rng + ?Sized>(input: usize, hidden: usize, out: usize, rng: &mut R) -> Self {
        let (hidden, last) = if hidden > 0 {
            (Some((fan_in_uniform(input, hidden, 1.0, rng), Array1::zeros(hidden))), hidden)
        } else {
            (None, input)
        };
        Head {
            hidden,
            w_out: fan_in_uniform(last, out, 1.0, rng),
            b_out: Array1::zeros(out),
        }
    }
}

impl Parameters for Head {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        if let Some((w, b)) = &self.hidden {
            view2(out, prefix, "w_hidden", ParamKind::Weight, w);
            view1(out, prefix, "b_hidden", ParamKind::Bias, b);
        }
        view2(out, prefix, "w_out", ParamKind::Weight, &self.w_out);
        view1(out, prefix, "b_out", ParamKind::Bias, &self.b_out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        if let Some((w, b)) = &mut self.hidden {
            view2_mut(out, prefix, "w_hidden", ParamKind::Weight, w);
            view1_mut(out, prefix, "b_hidden", ParamKind::Bias, b);
        }
        view2_mut(out, prefix, "w_out", ParamKind::Weight, &mut self.w_out);
        view1_mut(out, prefix, "b_out", ParamKind::Bias, &mut self.b_out);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrassModel {
    pub config: GrassConfig,
    pub encoder: EncoderParams,
    pub layers: Vec<LayerParams>,
    pub head: Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelOutput {
    pub node_outputs: Array2<f64>,
    pub edge_outputs: Array2<f64>,
    /// `G×3n` for graph-level tasks.
    pub pooled: Option<Array2<f64>>,
    /// `G×out` for graph tasks, `|V|×out` for node classification.
    pub predictions: Array2<f64>,
}

/// Intermediate values kept for the backward pass and for committing
/// running statistics after a training step.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    encoder: EncoderCache,
    layers: Vec<LayerCache>,
    head_input: Array2<f64>,
    head_pre: Option<Array2<f64>>,
    head_act: Option<Array2<f64>>,
    pool_counts: Option<Array2<f64>>,
}

impl GrassModel {
    /// Builds a model with freshly initialized parameters. Deterministic for
    /// a given RNG state.
    pub fn init<R: Rng + ?Sized>(config: &GrassConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let m = &config.model;
        let shape = EncoderShape {
            dim: m.dim,
            node_in: m.node_features,
            edge_in: m.edge_features,
            rrwp_k: config.rrwp.enabled.then_some(config.rrwp.k),
            degree_mode: config.encode.degree_mode,
            max_out_degree: config.encode.max_out_degree,
            max_in_degree: config.encode.max_in_degree,
            bn_eps: config.encode.bn_eps,
            bn_momentum: config.encode.bn_momentum,
        };
        let encoder = EncoderParams::init(&shape, rng)?;
        let beta = deepnorm_beta(m.layers);
        let layers = (0..m.layers)
            .map(|_| LayerParams::init(m.dim, config.norm.kind, config.norm.eps, config.norm.momentum, beta, rng))
            .collect();
        let head = if m.task.is_graph_level() {
            Head::init(3 * m.dim, m.head_hidden, m.out_dim, rng)
        } else {
            Head::init(m.dim, 0, m.out_dim, rng)
        };
        Ok(GrassModel {
            config: config.clone(),
            encoder,
            layers,
            head,
        })
    }

    pub fn alpha(&self) -> f64 {
        deepnorm_alpha(self.layers.len())
    }

    pub fn dim(&self) -> usize {
        self.config.model.dim
    }

    pub fn attention_settings(&self) -> AttentionSettings {
        let m = &self.config.model;
        AttentionSettings {
            activation: m.activation,
            eps: m.attention_eps,
            logit_clamp: m.logit_clamp,
            log_length_scaling: m.log_length_scaling,
        }
    }

    fn activation(&self) -> Activation {
        self.config.model.activation
    }

    /// Orientation of layer `layer` (1-based) over the batch's rewired edges.
    pub fn layer_topology(&self, base: &AttentionTopology, layer: usize) -> AttentionTopology {
        AttentionTopology::for_layer(base, layer, self.config.edge_flip.enabled)
    }

    /// One DropKey mask per layer: all-keep in eval mode.
    pub fn sample_masks<R: Rng + ?Sized>(&self, num_edges: usize, mode: Mode, rng: &mut R) -> Vec<DropKeyMask> {
        (0..self.layers.len())
            .map(|_| DropKeyMask::sample(num_edges, self.dim(), self.config.dropkey.rate, mode, rng))
            .collect()
    }

    /// Forward pass with DropKey masks drawn from `rng`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &PreparedBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(ModelOutput, ForwardCache)> {
        let masks = self.sample_masks(batch.num_edges(), mode, rng);
        self.forward_with_masks(batch, mode, &masks)
    }

    fn encoder_inputs<'a>(&self, batch: &'a PreparedBatch) -> EncoderInputs<'a> {
        EncoderInputs {
            node_feat: batch.node_feat.view(),
            edge_feat: batch.edge_feat.view(),
            edge_added: &batch.edge_added,
            node_rw: batch.node_rw.view(),
            edge_rw: batch.edge_rw.view(),
            out_degree: &batch.out_degree,
            in_degree: &batch.in_degree,
        }
    }

    /// Forward pass with explicit per-layer masks.
    pub fn forward_with_masks(
        &self,
        batch: &PreparedBatch,
        mode: Mode,
        masks: &[DropKeyMask],
    ) -> Result<(ModelOutput, ForwardCache)> {
        if masks.len() != self.layers.len() {
            return Err(invalid("need one DropKey mask per layer"));
        }
        let (mut x, mut e, encoder_cache) = apply_encodings(&self.encoder, &self.encoder_inputs(batch), mode)?;
        let base = batch.topology();
        let settings = self.attention_settings();
        let alpha = self.alpha();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (idx, (params, mask)) in self.layers.iter().zip(masks).enumerate() {
            let layer = idx + 1;
            let topo = self.layer_topology(&base, layer);
            let (xn, en, cache) = layer_forward(params, &x, &e, &topo, &settings, alpha, mask, mode, layer)?;
            x = xn;
            e = en;
            caches.push(cache);
        }

        let task = self.config.model.task;
        let (head_input, pooled, pool_counts) = if task.is_graph_level() {
            let (pooled, counts) = self.pool(batch, &x, &e);
            (pooled.clone(), Some(pooled), counts)
        } else {
            (x.clone(), None, None)
        };
        let (predictions, head_pre, head_act) = self.head_forward(&head_input);
        Ok((
            ModelOutput {
                node_outputs: x,
                edge_outputs: e,
                pooled,
                predictions,
            },
            ForwardCache {
                encoder: encoder_cache,
                layers: caches,
                head_input,
                head_pre,
                head_act,
                pool_counts,
            },
        ))
    }

    /// Per graph: node sum, original-edge sum, added-edge sum, concatenated.
    /// Mean pooling divides each segment by its element count (empty → 0).
    /// Returns the pooled matrix and, for mean pooling, the divisors.
    pub fn pool(&self, batch: &PreparedBatch, x: &Array2<f64>, e: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>) {
        let n = x.ncols();
        let g = batch.num_graphs;
        let mut pooled = Array2::zeros((g, 3 * n));
        pooled
            .slice_mut(s![.., ..n])
            .assign(&scatter_add_rows(&x.view(), &batch.node_graph, g));
        let (orig_idx, added_idx) = segment_indices(batch);
        pooled
            .slice_mut(s![.., n..2 * n])
            .assign(&scatter_add_rows(&e.view(), &orig_idx, g + 1).slice(s![..g, ..]));
        pooled
            .slice_mut(s![.., 2 * n..])
            .assign(&scatter_add_rows(&e.view(), &added_idx, g + 1).slice(s![..g, ..]));
        if self.config.pool.kind == PoolKind::Sum {
            return (pooled, None);
        }
        let mut counts = Array2::zeros((g, 3));
        for &gi in &batch.node_graph {
            counts[[gi, 0]] += 1.0;
        }
        for (&gi, &added) in batch.edge_graph.iter().zip(&batch.edge_added) {
            counts[[gi, if added { 2 } else { 1 }]] += 1.0;
        }
        let divisors = counts.mapv(|c: f64| if c > 0.0 { 1.0 / c } else { 0.0 });
        for gi in 0..g {
            for seg in 0..3 {
                let mut part = pooled.slice_mut(s![gi, seg * n..(seg + 1) * n]);
                part *= divisors[[gi, seg]];
            }
        }
        (pooled, Some(divisors))
    }

    fn head_forward(&self, input: &Array2<f64>) -> (Array2<f64>, Option<Array2<f64>>, Option<Array2<f64>>) {
        match &self.head.hidden {
            Some((w, b)) => {
                let pre = input.dot(w) + b;
                let act = self.activation().forward(&pre);
                let out = act.dot(&self.head.w_out) + &self.head.b_out;
                (out, Some(pre), Some(act))
            }
            None => (input.dot(&self.head.w_out) + &self.head.b_out, None, None),
        }
    }

    /// Gradients of all parameters given the gradient of the predictions.
    pub fn backward(&self, batch: &PreparedBatch, cache: &ForwardCache, g_pred: &Array2<f64>) -> GrassModel {
        let mut grad = self.clone();
        grad.zero();

        // head
        let g_input = match (&self.head.hidden, &cache.head_pre, &cache.head_act) {
            (Some((w, _)), Some(pre), Some(act)) => {
                grad.head.w_out += &act.t().dot(g_pred);
                grad.head.b_out += &g_pred.sum_axis(Axis(0));
                let g_pre = self.activation().backward(pre, &g_pred.dot(&self.head.w_out.t()));
                let (gw, gb) = grad.head.hidden.as_mut().expect("mirrors head");
                *gw += &cache.head_input.t().dot(&g_pre);
                *gb += &g_pre.sum_axis(Axis(0));
                g_pre.dot(&w.t())
            }
            _ => {
                grad.head.w_out += &cache.head_input.t().dot(g_pred);
                grad.head.b_out += &g_pred.sum_axis(Axis(0));
                g_pred.dot(&self.head.w_out.t())
            }
        };

        // pooling
        let n = self.dim();
        let (mut gx, mut ge) = if self.config.model.task.is_graph_level() {
            let mut g_pool = g_input;
            if let Some(div) = &cache.pool_counts {
                for gi in 0..g_pool.nrows() {
                    for seg in 0..3 {
                        let mut part = g_pool.slice_mut(s![gi, seg * n..(seg + 1) * n]);
                        part *= div[[gi, seg]];
                    }
                }
            }
            let gx = g_pool.slice(s![.., ..n]).select(Axis(0), &batch.node_graph);
            let mut ge = Array2::zeros((batch.num_edges(), n));
            for (idx, (mut row, &gi)) in ge.outer_iter_mut().zip(&batch.edge_graph).enumerate() {
                let seg = if batch.edge_added[idx] { 2 } else { 1 };
                row.assign(&g_pool.slice(s![gi, seg * n..(seg + 1) * n]));
            }
            (gx, ge)
        } else {
            (g_input, Array2::zeros((batch.num_edges(), n)))
        };

        // layers
        let settings = self.attention_settings();
        let alpha = self.alpha();
        for (idx, lc) in cache.layers.iter().enumerate().rev() {
            let (nx, ne) = layer_backward(&self.layers[idx], lc, &settings, alpha, &gx, &ge, &mut grad.layers[idx]);
            gx = nx;
            ge = ne;
        }

        encodings_backward(
            &self.encoder,
            &self.encoder_inputs(batch),
            &cache.encoder,
            &gx,
            &ge,
            &mut grad.encoder,
        );
        grad
    }

    /// Folds the batch statistics of a train-mode pass into the running
    /// statistics used in eval mode.
    pub fn commit_running_stats(&mut self, cache: &ForwardCache) {
        commit_encoder_stats(&mut self.encoder, &cache.encoder);
        for (layer, lc) in self.layers.iter_mut().zip(&cache.layers) {
            layer.norm_node.commit(&lc.norm_node);
            layer.norm_edge.commit(&lc.norm_edge);
        }
    }
}

/// Edge-to-graph indices split by origin; edges of the other origin map to
/// the overflow row `num_graphs`.
fn segment_indices(batch: &PreparedBatch) -> (Vec<usize>, Vec<usize>) {
    let g = batch.num_graphs;
    batch
        .edge_graph
        .iter()
        .zip(&batch.edge_added)
        .map(|(&gi, &added)| if added { (g, gi) } else { (gi, g) })
        .unzip()
}

impl Parameters for GrassModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        self.encoder.visit(&join(prefix, "encoder"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), out);
        }
        self.head.visit(&join(prefix, "head"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        self.encoder.visit_mut(&join(prefix, "encoder"), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), out);
        }
        self.head.visit_mut(&join(prefix, "head"), out);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        self.encoder.visit_buffers(&join(prefix, "encoder"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit_buffers(&join(prefix, &format!("layers.{i}")), out);
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        self.encoder.visit_buffers_mut(&join(prefix, "encoder"), out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_buffers_mut(&join(prefix, &format!("layers.{i}")), out);
        }
    }
}
