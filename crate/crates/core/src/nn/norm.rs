//! Normalization layers with explicit backward passes.
//!
//! * [`Norm`] is the post-residual normalization of an attention layer:
//!   PN-V (divide every channel by the batch root mean square, no centering)
//!   or, as an ablation, per-row layer normalization.
//! * [`BatchNorm`] standardizes the raw random-walk and degree inputs of the
//!   encoders.

use ndarray::{Array1, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::param::{view1, view1_mut, ParamKind, ParamView, ParamViewMut, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    /// Batch root-mean-square normalization with a learnable gain.
    Pnv,
    /// Per-row layer normalization with gain and bias.
    Layer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub kind: NormKind,
    pub gain: Array1<f64>,
    pub bias: Option<Array1<f64>>,
    /// Running quadratic mean per channel (PN-V only).
    pub running_ms: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct NormCache {
    input: Array2<f64>,
    /// PN-V: per-channel divisor. Layer: per-row standard deviation.
    scale: Array1<f64>,
    /// PN-V: whether the divisor came from the batch and was above the floor.
    batch_dependent: Vec<bool>,
    /// Normalized values before gain (layer norm only).
    normalized: Option<Array2<f64>>,
    /// Batch quadratic mean, committed to the running state after the step.
    pub batch_ms: Option<Array1<f64>>,
}

impl Norm {
    pub fn new(kind: NormKind, dim: usize, eps: f64, momentum: f64) -> Self {
        Norm {
            kind,
            gain: Array1::ones(dim),
            bias: (kind == NormKind::Layer).then(|| Array1::zeros(dim)),
            running_ms: Array1::ones(dim),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, v: &Array2<f64>, mode: Mode) -> (Array2<f64>, NormCache) {
        match self.kind {
            NormKind::Pnv => self.pnv_forward(v, mode),
            NormKind::Layer => self.ln_forward(v),
        }
    }

    fn pnv_forward(&self, v: &Array2<f64>, mode: Mode) -> (Array2<f64>, NormCache) {
        let rows = v.nrows();
        let (ms, batch_ms) = match mode {
            Mode::Train if rows > 0 => {
                let ms = v.mapv(|x| x * x).sum_axis(Axis(0)) / rows as f64;
                (ms.clone(), Some(ms))
            }
            _ => (self.running_ms.clone(), None),
        };
        let rms = ms.mapv(f64::sqrt);
        let batch_dependent = rms
            .iter()
            .map(|&r| batch_ms.is_some() && r > self.eps)
            .collect();
        let scale = rms.mapv(|r| r.max(self.eps));
        let out = v / &scale * &self.gain;
        (
            out,
            NormCache {
                input: v.clone(),
                scale,
                batch_dependent,
                normalized: None,
                batch_ms,
            },
        )
    }

    fn ln_forward(&self, v: &Array2<f64>) -> (Array2<f64>, NormCache) {
        let cols = v.ncols() as f64;
        let mean = v.sum_axis(Axis(1)) / cols;
        let centered = v - &mean.view().insert_axis(Axis(1));
        let var = centered.mapv(|x| x * x).sum_axis(Axis(1)) / cols;
        let std = var.mapv(|x| (x + self.eps).sqrt());
        let normalized = centered / &std.view().insert_axis(Axis(1));
        let mut out = &normalized * &self.gain;
        if let Some(b) = &self.bias {
            out += b;
        }
        (
            out,
            NormCache {
                input: v.clone(),
                scale: std,
                batch_dependent: Vec::new(),
                normalized: Some(normalized),
                batch_ms: None,
            },
        )
    }

    /// Returns the input gradient and accumulates parameter gradients into
    /// `grad`.
    pub fn backward(&self, cache: &NormCache, gy: &Array2<f64>, grad: &mut Norm) -> Array2<f64> {
        match self.kind {
            NormKind::Pnv => {
                let v = &cache.input;
                let rows = v.nrows() as f64;
                grad.gain += &((gy * v).sum_axis(Axis(0)) / &cache.scale);
                let mut gv = gy * &(&self.gain / &cache.scale);
                if rows > 0.0 {
                    // d r_c / d v_ic = v_ic / (N r_c)
                    let dot = (gy * v).sum_axis(Axis(0));
                    for (c, mut col) in gv.axis_iter_mut(Axis(1)).enumerate() {
                        if !cache.batch_dependent[c] {
                            continue;
                        }
                        let r = cache.scale[c];
                        let coef = self.gain[c] * dot[c] / (rows * r * r * r);
                        col.zip_mut_with(&v.column(c), |g, &x| *g -= coef * x);
                    }
                }
                gv
            }
            NormKind::Layer => {
                let xhat = cache.normalized.as_ref().expect("layer norm cache");
                grad.gain += &(gy * xhat).sum_axis(Axis(0));
                if let Some(b) = grad.bias.as_mut() {
                    *b += &gy.sum_axis(Axis(0));
                }
                let gx = gy * &self.gain;
                let cols = gx.ncols() as f64;
                let mean_g = gx.sum_axis(Axis(1)) / cols;
                let mean_gx = (&gx * xhat).sum_axis(Axis(1)) / cols;
                let mut out = gx - &mean_g.view().insert_axis(Axis(1));
                out -= &(xhat * &mean_gx.view().insert_axis(Axis(1)));
                out / &cache.scale.view().insert_axis(Axis(1))
            }
        }
    }

    pub fn commit(&mut self, cache: &NormCache) {
        if let Some(ms) = &cache.batch_ms {
            self.running_ms = &self.running_ms * (1.0 - self.momentum) + ms * self.momentum;
        }
    }
}

impl Parameters for Norm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        view1(out, prefix, "gain", ParamKind::Gain, &self.gain);
        if let Some(b) = &self.bias {
            view1(out, prefix, "bias", ParamKind::Bias, b);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        view1_mut(out, prefix, "gain", ParamKind::Gain, &mut self.gain);
        if let Some(b) = &mut self.bias {
            view1_mut(out, prefix, "bias", ParamKind::Bias, b);
        }
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        if self.kind == NormKind::Pnv {
            out.push((super::param::join(prefix, "running_ms"), self.running_ms.as_slice().unwrap()));
        }
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        if self.kind == NormKind::Pnv {
            out.push((
                super::param::join(prefix, "running_ms"),
                self.running_ms.as_slice_mut().unwrap(),
            ));
        }
    }
}

/// Per-channel batch normalization with learnable scale and shift.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    normalized: Array2<f64>,
    std: Array1<f64>,
    from_batch: bool,
    pub batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

impl BatchNorm {
    pub fn new(dim: usize, eps: f64, momentum: f64) -> Self {
        BatchNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            eps,
            momentum,
        }
    }

    pub fn forward(&self, v: &Array2<f64>, mode: Mode) -> (Array2<f64>, BatchNormCache) {
        let rows = v.nrows();
        let (mean, var, batch_stats) = match mode {
            Mode::Train if rows > 0 => {
                let mean = v.sum_axis(Axis(0)) / rows as f64;
                let var = (v - &mean).mapv(|x| x * x).sum_axis(Axis(0)) / rows as f64;
                let unbiased = if rows > 1 {
                    &var * (rows as f64 / (rows - 1) as f64)
                } else {
                    var.clone()
                };
                (mean.clone(), var, Some((mean, unbiased)))
            }
            _ => (self.running_mean.clone(), self.running_var.clone(), None),
        };
        let std = var.mapv(|x| (x + self.eps).sqrt());
        let normalized = (v - &mean) / &std;
        let out = &normalized * &self.gamma + &self.beta;
        (
            out,
            BatchNormCache {
                normalized,
                std,
                from_batch: batch_stats.is_some(),
                batch_stats,
            },
        )
    }

    pub fn backward(&self, cache: &BatchNormCache, gy: &Array2<f64>, grad: &mut BatchNorm) -> Array2<f64> {
        let xhat = &cache.normalized;
        grad.gamma += &(gy * xhat).sum_axis(Axis(0));
        grad.beta += &gy.sum_axis(Axis(0));
        let gx = gy * &self.gamma;
        if !cache.from_batch {
            return gx / &cache.std;
        }
        let rows = gx.nrows() as f64;
        let mean_g = gx.sum_axis(Axis(0)) / rows;
        let mean_gx = (&gx * xhat).sum_axis(Axis(0)) / rows;
        (gx - &mean_g - &(xhat * &mean_gx)) / &cache.std
    }

    pub fn commit(&mut self, cache: &BatchNormCache) {
        if let Some((mean, var)) = &cache.batch_stats {
            let m = self.momentum;
            self.running_mean = &self.running_mean * (1.0 - m) + mean * m;
            self.running_var = &self.running_var * (1.0 - m) + var * m;
        }
    }
}

impl Parameters for BatchNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
        view1(out, prefix, "gamma", ParamKind::Gain, &self.gamma);
        view1(out, prefix, "beta", ParamKind::Bias, &self.beta);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
        view1_mut(out, prefix, "gamma", ParamKind::Gain, &mut self.gamma);
        view1_mut(out, prefix, "beta", ParamKind::Bias, &mut self.beta);
    }

    fn visit_buffers<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a [f64])>) {
        out.push((super::param::join(prefix, "running_mean"), self.running_mean.as_slice().unwrap()));
        out.push((super::param::join(prefix, "running_var"), self.running_var.as_slice().unwrap()));
    }

    fn visit_buffers_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut [f64])>) {
        out.push((
            super::param::join(prefix, "running_mean"),
            self.running_mean.as_slice_mut().unwrap(),
        ));
        out.push((
            super::param::join(prefix, "running_var"),
            self.running_var.as_slice_mut().unwrap(),
        ));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};

    fn random(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-2.0..2.0))
    }

    #[test]
    fn pnv_constant_input_gives_ones() {
        let norm = Norm::new(NormKind::Pnv, 3, 1e-5, 0.1);
        let (out, _) = norm.forward(&Array2::from_elem((4, 3), 2.5), Mode::Train);
        assert!(out.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn pnv_is_scale_invariant_in_train_mode() {
        let norm = Norm::new(NormKind::Pnv, 3, 1e-5, 0.1);
        let v = random(5, 3, 1);
        let (a, _) = norm.forward(&v, Mode::Train);
        let (b, _) = norm.forward(&(&v * 2.0), Mode::Train);
        assert!((&a - &b).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn pnv_eval_uses_running_statistics() {
        let mut norm = Norm::new(NormKind::Pnv, 2, 1e-5, 0.1);
        let v = random(6, 2, 2);
        let (_, cache) = norm.forward(&v, Mode::Train);
        norm.commit(&cache);
        let (a, c) = norm.forward(&v, Mode::Eval);
        let (b, _) = norm.forward(&v, Mode::Eval);
        assert_eq!(a, b);
        assert!(c.batch_ms.is_none());
        assert!(norm.running_ms.iter().all(|&x| x != 1.0));
    }

    #[test]
    fn pnv_zero_input_hits_floor() {
        let norm = Norm::new(NormKind::Pnv, 2, 1e-5, 0.1);
        let (out, _) = norm.forward(&Array2::zeros((3, 2)), Mode::Train);
        assert!(out.iter().all(|x| x.is_finite() && *x == 0.0));
    }

    fn check_grad(f: impl Fn(&Array2<f64>) -> (f64, Array2<f64>), v: &Array2<f64>) {
        let (_, analytic) = f(v);
        let h = 1e-6;
        for idx in 0..v.len() {
            let mut p = v.clone();
            let mut m = v.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let fd = (f(&p).0 - f(&m).0) / (2.0 * h);
            let a = analytic.as_slice().unwrap()[idx];
            assert!((fd - a).abs() < 1e-6 * (1.0 + a.abs()), "entry {idx}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn norm_backward_matches_finite_differences() {
        let weights = random(5, 3, 9);
        for kind in [NormKind::Pnv, NormKind::Layer] {
            let mut norm = Norm::new(kind, 3, 1e-5, 0.1);
            norm.gain = array![0.5, 1.5, -1.0];
            let f = |v: &Array2<f64>| {
                let (out, cache) = norm.forward(v, Mode::Train);
                let loss = (&out * &weights).sum();
                let mut grad = norm.clone();
                grad.zero();
                (loss, norm.backward(&cache, &weights, &mut grad))
            };
            check_grad(f, &random(5, 3, 4));
        }
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let weights = random(6, 2, 3);
        let mut bn = BatchNorm::new(2, 1e-5, 0.1);
        bn.gamma = array![0.7, -1.3];
        for mode in [Mode::Train, Mode::Eval] {
            let f = |v: &Array2<f64>| {
                let (out, cache) = bn.forward(v, mode);
                let mut grad = bn.clone();
                grad.zero();
                ((&out * &weights).sum(), bn.backward(&cache, &weights, &mut grad))
            };
            check_grad(f, &random(6, 2, 8));
        }
    }

    #[test]
    fn batchnorm_standardizes_in_train_mode() {
        let bn = BatchNorm::new(2, 1e-12, 0.1);
        let (out, _) = bn.forward(&random(50, 2, 5), Mode::Train);
        let mean = out.sum_axis(Axis(0)) / 50.0;
        let var = out.mapv(|x| x * x).sum_axis(Axis(0)) / 50.0;
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert!(var.iter().all(|v| (v - 1.0).abs() < 1e-8));
    }
}
