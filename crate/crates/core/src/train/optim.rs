//! Lion: sign of an interpolated momentum, decoupled weight decay.

use crate::error::{GrassError, Result};
use crate::nn::{ParamKind, Parameters};

#[derive(Debug, Clone, PartialEq)]
pub struct Lion {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    /// One buffer per parameter tensor, in visiting order.
    pub momentum: Vec<Vec<f64>>,
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl Lion {
    pub fn new<P: Parameters>(params: &P, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Lion {
            beta1,
            beta2,
            weight_decay,
            momentum: params.params().iter().map(|p| vec![0.0; p.data.len()]).collect(),
        }
    }

    /// `p ← p − lr·(sign(β1·m + (1−β1)·g) + wd·p)`, then
    /// `m ← β2·m + (1−β2)·g`. Decay applies to `Weight` tensors only. A
    /// non-finite gradient aborts before anything is modified.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P, lr: f64) -> Result<()> {
        let grads = grads.params();
        let mut params = params.params_mut();
        if grads.len() != params.len() || params.len() != self.momentum.len() {
            return Err(crate::error::invalid("optimizer state does not match the parameters"));
        }
        for (p, g) in params.iter().zip(&grads) {
            if p.data.len() != g.data.len() {
                return Err(crate::error::invalid(format!("gradient shape mismatch for {}", p.name)));
            }
            if let Some(idx) = g.data.iter().position(|v| !v.is_finite()) {
                return Err(GrassError::NonFinite {
                    context: "optimizer step".into(),
                    message: format!("gradient {}[{idx}] = {}", g.name, g.data[idx]),
                });
            }
        }
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), m) in params.iter_mut().zip(&grads).zip(&mut self.momentum) {
            let wd = if p.kind == ParamKind::Weight { self.weight_decay } else { 0.0 };
            for ((w, &gv), mv) in p.data.iter_mut().zip(g.data).zip(m.iter_mut()) {
                let update = sign(b1 * *mv + (1.0 - b1) * gv);
                *w -= lr * (update + wd * *w);
                *mv = b2 * *mv + (1.0 - b2) * gv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::param::{view1, view1_mut, ParamView, ParamViewMut};
    use ndarray::Array1;
    use proptest::prelude::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Toy {
        w: Array1<f64>,
        b: Array1<f64>,
    }

    impl Parameters for Toy {
        fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<ParamView<'a>>) {
            view1(out, prefix, "w", ParamKind::Weight, &self.w);
            view1(out, prefix, "b", ParamKind::Bias, &self.b);
        }
        fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamViewMut<'a>>) {
            view1_mut(out, prefix, "w", ParamKind::Weight, &mut self.w);
            view1_mut(out, prefix, "b", ParamKind::Bias, &mut self.b);
        }
    }

    fn toy(w: Vec<f64>, b: Vec<f64>) -> Toy {
        Toy {
            w: Array1::from(w),
            b: Array1::from(b),
        }
    }

    #[test]
    fn positive_gradient_moves_by_exactly_lr() {
        let mut p = toy(vec![0.5, -2.0], vec![1.0]);
        let g = toy(vec![3.0, 1e-9], vec![0.2]);
        let mut opt = Lion::new(&p, 0.95, 0.98, 0.0);
        opt.step(&mut p, &g, 0.01).unwrap();
        assert_eq!(p, toy(vec![0.5 - 0.01, -2.0 - 0.01], vec![1.0 - 0.01]));
        assert!((opt.momentum[0][0] - 0.02 * 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_is_pure_decay_on_weights_only() {
        let mut p = toy(vec![2.0, -4.0], vec![1.5]);
        let g = toy(vec![0.0, 0.0], vec![0.0]);
        let mut opt = Lion::new(&p, 0.9, 0.99, 0.3);
        opt.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p.w.to_vec(), vec![2.0 * (1.0 - 0.1 * 0.3), -4.0 * (1.0 - 0.1 * 0.3)]);
        assert_eq!(p.b.to_vec(), vec![1.5]);
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut p = toy(vec![1.0], vec![1.0]);
        let before = p.clone();
        let g = toy(vec![0.1], vec![f64::NAN]);
        let mut opt = Lion::new(&p, 0.9, 0.99, 0.1);
        let err = opt.step(&mut p, &g, 0.1).unwrap_err();
        assert!(matches!(err, GrassError::NonFinite { .. }));
        assert!(err.to_string().contains("b[0]"));
        assert_eq!(p, before);
        assert!(opt.momentum.iter().flatten().all(|&m| m == 0.0));
    }

    proptest! {
        #[test]
        fn update_magnitude_is_lr_or_zero(
            g in prop::collection::vec(-5.0f64..5.0, 4),
            m in prop::collection::vec(-5.0f64..5.0, 4),
            lr in 1e-6f64..1.0,
        ) {
            let mut p = toy(vec![0.0; 4], vec![]);
            let grads = toy(g, vec![]);
            let mut opt = Lion::new(&p, 0.95, 0.98, 0.0);
            opt.momentum[0] = m;
            opt.step(&mut p, &grads, lr).unwrap();
            for &v in &p.w {
                prop_assert!(v.abs() == lr || v == 0.0);
            }
        }

        #[test]
        fn negating_gradient_and_momentum_negates_update(
            g in prop::collection::vec(-5.0f64..5.0, 3),
            m in prop::collection::vec(-5.0f64..5.0, 3),
        ) {
            let run = |sgn: f64| {
                let mut p = toy(vec![0.0; 3], vec![]);
                let grads = toy(g.iter().map(|v| sgn * v).collect(), vec![]);
                let mut opt = Lion::new(&p, 0.9, 0.99, 0.0);
                opt.momentum[0] = m.iter().map(|v| sgn * v).collect();
                opt.step(&mut p, &grads, 0.1).unwrap();
                p.w.to_vec()
            };
            let (a, b) = (run(1.0), run(-1.0));
            for (x, y) in a.iter().zip(&b) {
                prop_assert_eq!(*x, -*y);
            }
        }
    }
}
