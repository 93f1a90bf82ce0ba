//! Row gathers and scatters over edge lists, plus activations.

use ndarray::{Array2, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

/// `out[e] = x[idx[e]]`.
pub fn gather_rows(x: &ArrayView2<f64>, idx: &[usize]) -> Array2<f64> {
    x.select(Axis(0), idx)
}

/// `out[idx[e]] += x[e]` into an array with `rows` rows.
pub fn scatter_add_rows(x: &ArrayView2<f64>, idx: &[usize], rows: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, x.ncols()));
    for (row, &target) in x.outer_iter().zip(idx) {
        let mut dst = out.row_mut(target);
        dst += &row;
    }
    out
}

/// Column sums.
pub fn sum_rows(x: &Array2<f64>) -> ndarray::Array1<f64> {
    x.sum_axis(Axis(0))
}

/// ReLU-family activations for the feed-forward blocks and task heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    /// `x * sigmoid(x)`
    Silu,
    /// `x * tanh(softplus(x))`
    Mish,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Silu => x * sigmoid(x),
            Activation::Mish => x * softplus(x).tanh(),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Mish => {
                let t = softplus(x).tanh();
                t + x * (1.0 - t * t) * sigmoid(x)
            }
        }
    }

    pub fn forward(self, x: &Array2<f64>) -> Array2<f64> {
        x.mapv(|v| self.apply(v))
    }

    /// `grad ⊙ φ'(pre)`.
    pub fn backward(self, pre: &Array2<f64>, grad: &Array2<f64>) -> Array2<f64> {
        let mut out = grad.clone();
        Zip::from(&mut out).and(pre).for_each(|g, &p| *g *= self.derivative(p));
        out
    }
}
