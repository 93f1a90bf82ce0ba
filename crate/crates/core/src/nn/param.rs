//! Named parameter views shared by the optimizer, checkpoints and gradient
//! checks. Every parameter container can list its tensors in a fixed order;
//! gradients are stored in a container of the same type, so the two lists
//! zip up entry by entry.

use ndarray::{Array1, Array2};
use rand::Rng;

/// What a tensor is used for. Decoupled weight decay only touches `Weight`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Embedding,
    Gain,
}

pub struct ParamView<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a [f64],
}

pub struct ParamViewMut<'a> {
    pub name: String,
    pub kind: ParamKind,
    pub data: &'a mut [f64],
}

/// Containers of trainable tensors (and non-trainable running statistics).
pub trait Parameters {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>);

    /// Running statistics; saved in checkpoints, never optimized.
    fn visit_buffers<'a>(&'a self, _prefix: &str, _out: &mut Vec<(String, &'a [f64])>) {}
    fn visit_buffers_mut<'a>(&'a mut self, _prefix: &str, _out: &mut Vec<(String, &'a mut [f64])>) {}

    fn params(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }

    fn params_mut(&mut self) -> Vec<ParamViewMut<'_>> {
        let mut out = Vec::new();
        self.visit_mut("", &mut out);
        out
    }

    fn buffers(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        self.visit_buffers("", &mut out);
        out
    }

    fn buffers_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        self.visit_buffers_mut("", &mut out);
        out
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.data.len()).sum()
    }

    /// Sets every trainable entry to zero.
    fn zero(&mut self) {
        for p in self.params_mut() {
            p.data.fill(0.0);
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub(crate) fn view2<'a>(out: &mut Vec<ParamView<'a>>, prefix: &str, name: &str, kind: ParamKind, a: &'a Array2<f64>) {
    out.push(ParamView {
        name: join(prefix, name),
        kind,
        data: a.as_slice().expect("standard layout"),
    });
}

pub(crate) fn view1<'a>(out: &mut Vec<ParamView<'a>>, prefix: &str, name: &str, kind: ParamKind, a: &'a Array1<f64>) {
    out.push(ParamView {
        name: join(prefix, name),
        kind,
        data: a.as_slice().expect("standard layout"),
    });
}

pub(crate) fn view2_mut<'a>(
    out: &mut Vec<ParamViewMut<'a>>,
    prefix: &str,
    name: &str,
    kind: ParamKind,
    a: &'a mut Array2<f64>,
) {
    out.push(ParamViewMut {
        name: join(prefix, name),
        kind,
        data: a.as_slice_mut().expect("standard layout"),
    });
}

pub(crate) fn view1_mut<'a>(
    out: &mut Vec<ParamViewMut<'a>>,
    prefix: &str,
    name: &str,
    kind: ParamKind,
    a: &'a mut Array1<f64>,
) {
    out.push(ParamViewMut {
        name: join(prefix, name),
        kind,
        data: a.as_slice_mut().expect("standard layout"),
    });
}

/// Fan-in scaled uniform matrix, `U(-s, s)` with `s = gain * sqrt(3 / fan_in)`
/// so entries have variance `gain^2 / fan_in`.
pub fn fan_in_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, gain: f64, rng: &mut R) -> Array2<f64> {
    let bound = gain * (3.0 / rows.max(1) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn uniform_vec<R: Rng + ?Sized>(len: usize, bound: f64, rng: &mut R) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || rng.random_range(-bound..=bound))
}
