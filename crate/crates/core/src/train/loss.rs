//! Losses with their gradient seeds, and the matching metrics.
//!
//! Regression trains on the mean absolute error; classification on
//! cross-entropy against label-smoothed targets. Node-classification labels
//! are read from a per-graph `Values` list holding one integer class per node.

use ndarray::{Array2, Axis};

use crate::config::Task;
use crate::dataset::Target;
use crate::error::{invalid, Result};

/// Mean loss over the batch, its gradient with respect to the predictions,
/// and the raw metric tallies (`metric_sum / metric_count` is MAE for
/// regression and accuracy for classification).
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
    pub metric_sum: f64,
    pub metric_count: usize,
    /// Rows the loss averages over.
    pub rows: usize,
}

/// Mean absolute error and its subgradient (0 where prediction == target).
pub fn l1_loss(pred: &Array2<f64>, target: &Array2<f64>) -> (f64, Array2<f64>) {
    let count = pred.len().max(1) as f64;
    let diff = pred - target;
    let loss = diff.iter().map(|d| d.abs()).sum::<f64>() / count;
    let grad = diff.mapv(|d| {
        if d > 0.0 {
            1.0 / count
        } else if d < 0.0 {
            -1.0 / count
        } else {
            0.0
        }
    });
    (loss, grad)
}

/// `(1 − ς)·onehot + ς / C` per row.
pub fn smoothed_targets(labels: &[usize], classes: usize, smoothing: f64) -> Array2<f64> {
    let mut q = Array2::from_elem((labels.len(), classes), smoothing / classes as f64);
    for (r, &c) in labels.iter().enumerate() {
        q[[r, c]] += 1.0 - smoothing;
    }
    q
}

fn log_softmax(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

/// Mean smoothed cross-entropy over rows; gradient `(softmax − q) / rows`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize], smoothing: f64) -> Result<(f64, Array2<f64>)> {
    let classes = logits.ncols();
    if labels.len() != logits.nrows() {
        return Err(invalid(format!("{} labels for {} prediction rows", labels.len(), logits.nrows())));
    }
    if let Some(&c) = labels.iter().find(|&&c| c >= classes) {
        return Err(invalid(format!("class index {c} out of range for {classes} classes")));
    }
    let rows = labels.len().max(1) as f64;
    let q = smoothed_targets(labels, classes, smoothing);
    let logp = log_softmax(logits);
    let loss = -(&q * &logp).sum() / rows;
    let grad = (logp.mapv(f64::exp) - q) / rows;
    Ok((loss, grad))
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn class_labels(task: Task, targets: &[Target], rows: usize) -> Result<Vec<usize>> {
    let mut labels = Vec::with_capacity(rows);
    for (g, t) in targets.iter().enumerate() {
        match (task, t) {
            (Task::GraphClassification, Target::Class(c)) => labels.push(*c),
            (Task::NodeClassification, Target::Values(v)) => {
                for &x in v {
                    if !(x >= 0.0 && x.fract() == 0.0) {
                        return Err(invalid(format!("graph {g}: node label {x} is not a class index")));
                    }
                    labels.push(x as usize);
                }
            }
            _ => return Err(invalid(format!("graph {g}: target kind does not fit {task:?}"))),
        }
    }
    if labels.len() != rows {
        return Err(invalid(format!("{} labels for {rows} prediction rows", labels.len())));
    }
    Ok(labels)
}

/// Task loss for a batch's predictions.
pub fn batch_loss(task: Task, pred: &Array2<f64>, targets: &[Target], smoothing: f64) -> Result<LossOutput> {
    match task {
        Task::GraphRegression => {
            let width = pred.ncols();
            let mut t = Array2::zeros(pred.raw_dim());
            if targets.len() != pred.nrows() {
                return Err(invalid("one target per graph required"));
            }
            for (g, target) in targets.iter().enumerate() {
                match target {
                    Target::Values(v) if v.len() == width => {
                        t.row_mut(g).assign(&ndarray::ArrayView1::from(v.as_slice()));
                    }
                    _ => return Err(invalid(format!("graph {g}: expected {width} regression targets"))),
                }
            }
            let (loss, grad) = l1_loss(pred, &t);
            Ok(LossOutput {
                loss,
                grad,
                metric_sum: (pred - &t).iter().map(|d| d.abs()).sum(),
                metric_count: pred.len(),
                rows: pred.nrows(),
            })
        }
        Task::GraphClassification | Task::NodeClassification => {
            let labels = class_labels(task, targets, pred.nrows())?;
            let (loss, grad) = cross_entropy(pred, &labels, smoothing)?;
            let correct = pred
                .axis_iter(Axis(0))
                .zip(&labels)
                .filter(|(row, &c)| argmax(*row) == c)
                .count();
            Ok(LossOutput {
                loss,
                grad,
                metric_sum: correct as f64,
                metric_count: labels.len(),
                rows: labels.len(),
            })
        }
    }
}

/// Whether a new validation metric beats the best so far.
pub fn improves(task: Task, candidate: f64, best: f64) -> bool {
    if task.is_classification() {
        candidate > best
    } else {
        candidate < best
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn exact_predictions_have_zero_l1() {
        let p = array![[0.5], [-1.0]];
        let (loss, grad) = l1_loss(&p, &p);
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        for classes in [2, 3, 10] {
            let logits = Array2::from_elem((4, classes), 0.7);
            let (loss, _) = cross_entropy(&logits, &[0, 1, 0, 1], 0.0).unwrap();
            assert!((loss - (classes as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn smoothing_two_classes() {
        let q = smoothed_targets(&[0], 2, 0.1);
        assert!((q[[0, 0]] - 0.95).abs() < 1e-15);
        assert!((q[[0, 1]] - 0.05).abs() < 1e-15);
    }

    #[test]
    fn bad_class_index_is_rejected() {
        let logits = Array2::zeros((1, 3));
        assert!(cross_entropy(&logits, &[3], 0.1).is_err());
        let err = batch_loss(Task::NodeClassification, &logits, &[Target::Values(vec![1.5])], 0.0);
        assert!(err.is_err());
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let logits = array![[0.3, -1.2, 2.0], [0.0, 0.5, -0.5]];
        let labels = [2, 0];
        let (_, grad) = cross_entropy(&logits, &labels, 0.1).unwrap();
        let h = 1e-6;
        for idx in [(0, 0), (0, 2), (1, 1)] {
            let mut p = logits.clone();
            p[idx] += h;
            let mut m = logits.clone();
            m[idx] -= h;
            let fd = (cross_entropy(&p, &labels, 0.1).unwrap().0 - cross_entropy(&m, &labels, 0.1).unwrap().0) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn metrics_tally() {
        let pred = array![[2.0, 0.0], [0.0, 1.0], [3.0, 1.0]];
        let out = batch_loss(
            Task::GraphClassification,
            &pred,
            &[Target::Class(0), Target::Class(0), Target::Class(0)],
            0.0,
        )
        .unwrap();
        assert_eq!((out.metric_sum, out.metric_count), (2.0, 3));
        let reg = batch_loss(
            Task::GraphRegression,
            &array![[1.0], [2.0]],
            &[Target::Values(vec![0.5]), Target::Values(vec![3.0])],
            0.0,
        )
        .unwrap();
        assert_eq!((reg.metric_sum, reg.metric_count), (1.5, 2));
        assert!((reg.loss - 0.75).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn losses_are_non_negative(
            vals in prop::collection::vec(-10.0f64..10.0, 6),
            label in 0usize..3,
            smoothing in 0.0f64..0.5,
        ) {
            let logits = Array2::from_shape_vec((2, 3), vals.clone()).unwrap();
            let (ce, _) = cross_entropy(&logits, &[label, (label + 1) % 3], smoothing).unwrap();
            prop_assert!(ce >= 0.0);
            let (l1, _) = l1_loss(&logits, &Array2::zeros((2, 3)));
            prop_assert!(l1 >= 0.0);
        }

        #[test]
        fn smoothed_cross_entropy_is_minimized_at_the_smoothed_target(
            vals in prop::collection::vec(-3.0f64..3.0, 4),
            label in 0usize..4,
            smoothing in 0.01f64..0.5,
        ) {
            let q = smoothed_targets(&[label], 4, smoothing);
            // logits equal to log q put softmax exactly on q
            let opt = q.mapv(f64::ln);
            let (best, grad) = cross_entropy(&opt, &[label], smoothing).unwrap();
            prop_assert!(grad.iter().all(|g| g.abs() < 1e-12));
            let other = Array2::from_shape_vec((1, 4), vals).unwrap();
            let (loss, _) = cross_entropy(&other, &[label], smoothing).unwrap();
            prop_assert!(loss >= best - 1e-12);
        }
    }
}
