//! Central finite differences against analytic gradients, reported per
//! parameter block.
//!
//! The objective is a fixed random projection of the outputs,
//! `Σ out ⊙ w`, so every output coordinate contributes to the check.

use ndarray::Array2;
use rand::Rng;

use crate::model::{GrassModel, PreparedBatch};
use crate::nn::{
    layer_backward, layer_forward, AttentionSettings, AttentionTopology, DropKeyMask, LayerParams, Mode, Parameters,
};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error, so that gradients at the
    /// finite-difference noise level are compared absolutely.
    pub floor: f64,
    /// Evenly spaced entries probed per block; `None` probes all.
    pub max_entries_per_block: Option<usize>,
}

impl GradCheckOptions {
    pub fn with_tolerance(tolerance: f64) -> Self {
        GradCheckOptions {
            step: 1e-6,
            tolerance,
            floor: 1e-4,
            max_entries_per_block: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    /// Entry with the largest error: (index, analytic, numeric).
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &BlockReport> {
        self.blocks.iter().filter(|b| !(b.max_rel_error < self.tolerance))
    }

    /// One line per block.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for b in &self.blocks {
            let status = if b.max_rel_error < self.tolerance { "ok" } else { "FAIL" };
            out.push_str(&format!(
                "{status:4} {:40} entries={:<6} max_rel_err={:.3e}\n",
                b.name, b.checked, b.max_rel_error
            ));
        }
        out.push_str(&format!(
            "overall max_rel_err={:.3e} tolerance={:.1e} {}\n",
            self.max_rel_error(),
            self.tolerance,
            if self.passed() { "PASS" } else { "FAIL" }
        ));
        out
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(floor)
}

fn probe_indices(len: usize, limit: Option<usize>) -> Vec<usize> {
    match limit {
        Some(k) if k < len => (0..k).map(|i| i * len / k).collect(),
        _ => (0..len).collect(),
    }
}

fn check_block(
    name: String,
    analytic: &[f64],
    opts: &GradCheckOptions,
    mut numeric: impl FnMut(usize) -> f64,
) -> BlockReport {
    let mut report = BlockReport {
        name,
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for k in probe_indices(analytic.len(), opts.max_entries_per_block) {
        let fd = numeric(k);
        let err = relative_error(analytic[k], fd, opts.floor);
        report.checked += 1;
        // NaN compares false, so it is recorded through the negated test
        if !(err <= report.max_rel_error) {
            report.max_rel_error = err;
            report.worst = Some((k, analytic[k], fd));
        }
    }
    report
}

fn projection(out: &Array2<f64>, w: &Array2<f64>) -> f64 {
    (out * w).sum()
}

/// Checks `analytic` (a gradient-shaped model) against finite differences of
/// the model objective. Exposed separately so a tampered gradient can be
/// checked as a negative control.
pub fn check_model_gradient(
    model: &GrassModel,
    batch: &PreparedBatch,
    masks: &[DropKeyMask],
    weights: &Array2<f64>,
    analytic: &GrassModel,
    opts: &GradCheckOptions,
) -> GradCheckReport {
    let objective = |m: &GrassModel| -> f64 {
        match m.forward_with_masks(batch, Mode::Train, masks) {
            Ok((out, _)) => projection(&out.predictions, weights),
            Err(_) => f64::NAN,
        }
    };
    let blocks = analytic
        .params()
        .iter()
        .enumerate()
        .map(|(pi, g)| {
            check_block(g.name.clone(), g.data, opts, |k| {
                let mut plus = model.clone();
                plus.params_mut()[pi].data[k] += opts.step;
                let mut minus = model.clone();
                minus.params_mut()[pi].data[k] -= opts.step;
                (objective(&plus) - objective(&minus)) / (2.0 * opts.step)
            })
        })
        .collect();
    GradCheckReport {
        tolerance: opts.tolerance,
        blocks,
    }
}

/// Analytic model gradient of `Σ predictions ⊙ weights` in train mode.
pub fn model_gradient(
    model: &GrassModel,
    batch: &PreparedBatch,
    masks: &[DropKeyMask],
    weights: &Array2<f64>,
) -> crate::Result<GrassModel> {
    let (_, cache) = model.forward_with_masks(batch, Mode::Train, masks)?;
    Ok(model.backward(batch, &cache, weights))
}

/// Full-model check with DropKey masks and projection weights drawn from `rng`.
pub fn grad_check_model<R: Rng + ?Sized>(
    model: &GrassModel,
    batch: &PreparedBatch,
    opts: &GradCheckOptions,
    rng: &mut R,
) -> crate::Result<GradCheckReport> {
    let masks = model.sample_masks(batch.num_edges(), Mode::Train, rng);
    let (out, _) = model.forward_with_masks(batch, Mode::Train, &masks)?;
    let weights = Array2::from_shape_fn(out.predictions.dim(), |_| rng.random_range(-1.0..1.0));
    let analytic = model_gradient(model, batch, &masks, &weights)?;
    Ok(check_model_gradient(model, batch, &masks, &weights, &analytic, opts))
}

/// Inputs of a single-layer check.
#[derive(Debug, Clone)]
pub struct LayerProbe<'a> {
    pub x: &'a Array2<f64>,
    pub e: &'a Array2<f64>,
    pub topo: &'a AttentionTopology,
    pub settings: &'a AttentionSettings,
    pub alpha: f64,
    pub mask: &'a DropKeyMask,
    pub layer: usize,
}

/// One layer in train mode: every parameter block plus the two inputs
/// (`input.x`, `input.e`).
pub fn grad_check_layer<R: Rng + ?Sized>(
    params: &LayerParams,
    probe: &LayerProbe<'_>,
    opts: &GradCheckOptions,
    rng: &mut R,
) -> crate::Result<GradCheckReport> {
    let run = |p: &LayerParams, x: &Array2<f64>, e: &Array2<f64>| {
        layer_forward(
            p,
            x,
            e,
            probe.topo,
            probe.settings,
            probe.alpha,
            probe.mask,
            Mode::Train,
            probe.layer,
        )
    };
    let (xo, eo, cache) = run(params, probe.x, probe.e)?;
    let wx = Array2::from_shape_fn(xo.dim(), |_| rng.random_range(-1.0..1.0));
    let we = Array2::from_shape_fn(eo.dim(), |_| rng.random_range(-1.0..1.0));
    let mut grad = params.clone();
    grad.zero();
    let (gx, ge) = layer_backward(params, &cache, probe.settings, probe.alpha, &wx, &we, &mut grad);
    let objective = |p: &LayerParams, x: &Array2<f64>, e: &Array2<f64>| match run(p, x, e) {
        Ok((xo, eo, _)) => projection(&xo, &wx) + projection(&eo, &we),
        Err(_) => f64::NAN,
    };
    let h = opts.step;

    let mut blocks: Vec<BlockReport> = grad
        .params()
        .iter()
        .enumerate()
        .map(|(pi, g)| {
            check_block(g.name.clone(), g.data, opts, |k| {
                let mut plus = params.clone();
                plus.params_mut()[pi].data[k] += h;
                let mut minus = params.clone();
                minus.params_mut()[pi].data[k] -= h;
                (objective(&plus, probe.x, probe.e) - objective(&minus, probe.x, probe.e)) / (2.0 * h)
            })
        })
        .collect();
    let gx_flat: Vec<f64> = gx.iter().copied().collect();
    blocks.push(check_block("input.x".into(), &gx_flat, opts, |k| {
        let (r, c) = (k / probe.x.ncols(), k % probe.x.ncols());
        let mut plus = probe.x.clone();
        plus[[r, c]] += h;
        let mut minus = probe.x.clone();
        minus[[r, c]] -= h;
        (objective(params, &plus, probe.e) - objective(params, &minus, probe.e)) / (2.0 * h)
    }));
    let ge_flat: Vec<f64> = ge.iter().copied().collect();
    blocks.push(check_block("input.e".into(), &ge_flat, opts, |k| {
        let (r, c) = (k / probe.e.ncols(), k % probe.e.ncols());
        let mut plus = probe.e.clone();
        plus[[r, c]] += h;
        let mut minus = probe.e.clone();
        minus[[r, c]] -= h;
        (objective(params, probe.x, &plus) - objective(params, probe.x, &minus)) / (2.0 * h)
    }));
    Ok(GradCheckReport {
        tolerance: opts.tolerance,
        blocks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{GrassConfig, TEST_CONFIG};
    use crate::dataset::synthetic_molecules;
    use crate::encode::cache::GraphEncoding;
    use crate::nn::{deepnorm_alpha, NormKind};
    use crate::seed::GrassRng;
    use rand::SeedableRng;

    fn setup(zero: bool) -> (GrassModel, PreparedBatch) {
        let mut cfg = GrassConfig::from_toml_str(TEST_CONFIG).unwrap();
        cfg.model.node_features = crate::dataset::ATOM_TYPES;
        cfg.model.edge_features = crate::dataset::BOND_TYPES;
        let mut model = GrassModel::init(&cfg, &mut GrassRng::seed_from_u64(1)).unwrap();
        if zero {
            model.zero();
        }
        let data = synthetic_molecules(2, 3);
        let enc: Vec<_> = data.iter().map(|s| GraphEncoding::compute(s, cfg.rrwp.k).unwrap()).collect();
        let pairs: Vec<_> = data.iter().zip(&enc).collect();
        let batch = PreparedBatch::sample(&pairs, &cfg.rewire, true, &mut GrassRng::seed_from_u64(4)).unwrap();
        (model, batch)
    }

    fn opts() -> GradCheckOptions {
        GradCheckOptions {
            max_entries_per_block: Some(4),
            ..GradCheckOptions::with_tolerance(1e-4)
        }
    }

    #[test]
    fn zero_model_has_negligible_errors() {
        let (model, batch) = setup(true);
        let report = grad_check_model(&model, &batch, &opts(), &mut GrassRng::seed_from_u64(5)).unwrap();
        assert!(report.max_rel_error() < 1e-8, "{}", report.render());
    }

    #[test]
    fn random_model_passes_and_corruption_is_reported() {
        let (model, batch) = setup(false);
        let mut rng = GrassRng::seed_from_u64(6);
        let masks = model.sample_masks(batch.num_edges(), Mode::Train, &mut rng);
        let weights = Array2::from_shape_fn((batch.num_graphs, 1), |_| rng.random_range(-1.0..1.0));
        let analytic = model_gradient(&model, &batch, &masks, &weights).unwrap();
        let report = check_model_gradient(&model, &batch, &masks, &weights, &analytic, &opts());
        assert!(report.passed(), "{}\n{:?}", report.render(), report.failures().collect::<Vec<_>>());

        let mut corrupted = analytic.clone();
        corrupted.layers[0].w_attn[[0, 0]] += 0.5;
        let report = check_model_gradient(&model, &batch, &masks, &weights, &corrupted, &opts());
        assert!(!report.passed());
        let failed: Vec<_> = report.failures().map(|b| b.name.as_str()).collect();
        assert_eq!(failed, vec!["layers.0.w_attn"]);
        assert!(report.render().contains("FAIL"));
    }

    #[test]
    fn layer_check_covers_inputs() {
        let mut rng = GrassRng::seed_from_u64(7);
        let params = LayerParams::init(4, NormKind::Pnv, 1e-5, 0.1, 0.5, &mut rng);
        let topo = AttentionTopology::from_edges(5, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (1, 3), (3, 1)]);
        let x = Array2::from_shape_fn((5, 4), |_| rng.random_range(-1.0..1.0));
        let e = Array2::from_shape_fn((7, 4), |_| rng.random_range(-1.0..1.0));
        let settings = AttentionSettings {
            activation: crate::nn::Activation::Silu,
            eps: 1e-5,
            logit_clamp: 40.0,
            log_length_scaling: false,
        };
        let mask = DropKeyMask::keep_all();
        let probe = LayerProbe {
            x: &x,
            e: &e,
            topo: &topo.flipped(),
            settings: &settings,
            alpha: deepnorm_alpha(2),
            mask: &mask,
            layer: 2,
        };
        let report = grad_check_layer(&params, &probe, &GradCheckOptions::with_tolerance(1e-4), &mut rng).unwrap();
        assert!(report.passed(), "{}", report.render());
        assert!(report.blocks.iter().any(|b| b.name == "input.e" && b.checked == 28));
    }
}
