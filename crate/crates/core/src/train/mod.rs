//! Training and evaluation loops.
//!
//! Every random draw is derived from the run seed and its position: model
//! initialization from `(Init)`, the epoch order from `(Shuffle, epoch)`, the
//! rewiring of graph `i` in epoch `t` from `(Rewire, t, i)`, DropKey masks of
//! batch `b` from `(DropKey, t, b)` and validation rewiring from
//! `(EvalRewire, t, i)`. A run is therefore replayable from its config and
//! seed, independent of batch preparation order.

pub mod gradcheck;
pub mod loss;
pub mod optim;
pub mod schedule;

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::config::{GrassConfig, Task};
use crate::dataset::{Sample, Target};
use crate::encode::cache::GraphEncoding;
use crate::error::{invalid, GrassError, Result};
use crate::model::checkpoint::save_checkpoint;
use crate::model::{BatchItem, GrassModel, PreparedBatch};
use crate::nn::Mode;
use crate::rewire::{rewire, RewireConfig};
use crate::seed::{derive_rng, GrassRng, Stream};

pub use gradcheck::{grad_check_layer, grad_check_model, GradCheckOptions, GradCheckReport};
pub use loss::{batch_loss, LossOutput};
pub use optim::Lion;
pub use schedule::Schedule;

pub const METRICS_HEADER: &str = "epoch,split,loss,metric,lr,wallclock_s";

/// Samples paired with their precomputed encodings.
#[derive(Debug, Clone, Copy)]
pub struct Dataset<'a> {
    pub samples: &'a [Sample],
    pub encodings: &'a [GraphEncoding],
}

impl<'a> Dataset<'a> {
    pub fn new(samples: &'a [Sample], encodings: &'a [GraphEncoding]) -> Result<Self> {
        if samples.len() != encodings.len() {
            return Err(invalid(format!(
                "{} samples but {} encodings",
                samples.len(),
                encodings.len()
            )));
        }
        Ok(Dataset { samples, encodings })
    }

    /// Feature widths and target kinds must fit the model configuration.
    pub fn check_against(&self, cfg: &GrassConfig) -> Result<()> {
        let m = &cfg.model;
        for (i, s) in self.samples.iter().enumerate() {
            let g = &s.graph;
            if g.node_feature_dim() != m.node_features {
                return Err(invalid(format!(
                    "graph {i}: {} node features, config expects {}",
                    g.node_feature_dim(),
                    m.node_features
                )));
            }
            if g.num_edges() > 0 && g.edge_feature_dim() != m.edge_features {
                return Err(invalid(format!(
                    "graph {i}: {} edge features, config expects {}",
                    g.edge_feature_dim(),
                    m.edge_features
                )));
            }
            let fits = match (m.task, &s.target) {
                (Task::GraphRegression, Target::Values(v)) => v.len() == m.out_dim,
                (Task::GraphClassification, Target::Class(c)) => *c < m.out_dim,
                (Task::NodeClassification, Target::Values(v)) => {
                    v.len() == g.num_nodes() && v.iter().all(|&x| x >= 0.0 && x.fract() == 0.0 && x < m.out_dim as f64)
                }
                _ => false,
            };
            if !fits {
                return Err(invalid(format!("graph {i}: target does not fit task {:?}", m.task)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Rewires the selected graphs, each with its own RNG, and batches them.
pub fn prepare_batch(
    data: &Dataset<'_>,
    indices: &[usize],
    rewire_cfg: &RewireConfig,
    use_rrwp: bool,
    mut rng_for: impl FnMut(usize) -> GrassRng,
) -> Result<PreparedBatch> {
    let rewired = indices
        .iter()
        .map(|&i| rewire(&data.samples[i].graph, rewire_cfg, &mut rng_for(i)))
        .collect::<Result<Vec<_>>>()?;
    let items: Vec<BatchItem<'_>> = indices
        .iter()
        .zip(&rewired)
        .map(|(&i, h)| BatchItem {
            rewired: h,
            encoding: &data.encodings[i],
            target: &data.samples[i].target,
        })
        .collect();
    PreparedBatch::build(&items, use_rrwp)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// Row-weighted mean loss.
    pub loss: f64,
    /// MAE for regression, accuracy for classification.
    pub metric: f64,
    pub graphs: usize,
}

/// Eval-mode pass over `data`. Graph `i` is rewired with
/// `(rewire_seed, EvalRewire, pass, i)`, so distinct passes see distinct
/// random graphs and a repeated `(rewire_seed, pass)` replays exactly.
pub fn evaluate(
    model: &GrassModel,
    data: &Dataset<'_>,
    batch_size: usize,
    rewire_seed: u64,
    pass: u64,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(invalid("cannot evaluate on an empty dataset"));
    }
    let cfg = &model.config;
    data.check_against(cfg)?;
    let order: Vec<usize> = (0..data.len()).collect();
    let (mut loss_sum, mut rows, mut metric_sum, mut metric_count) = (0.0, 0usize, 0.0, 0usize);
    for chunk in order.chunks(batch_size.max(1)) {
        let batch = prepare_batch(data, chunk, &cfg.rewire, cfg.rrwp.enabled, |i| {
            derive_rng(rewire_seed, Stream::EvalRewire, &[pass, i as u64])
        })?;
        let masks = model.sample_masks(batch.num_edges(), Mode::Eval, &mut derive_rng(0, Stream::DropKey, &[]));
        let (out, _) = model.forward_with_masks(&batch, Mode::Eval, &masks)?;
        let lo = batch_loss(cfg.model.task, &out.predictions, &batch.targets, cfg.train.label_smoothing)?;
        loss_sum += lo.loss * lo.rows as f64;
        rows += lo.rows;
        metric_sum += lo.metric_sum;
        metric_count += lo.metric_count;
    }
    Ok(EvalReport {
        loss: loss_sum / rows.max(1) as f64,
        metric: metric_sum / metric_count.max(1) as f64,
        graphs: data.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub metric: f64,
    /// Learning rate of the epoch's last update.
    pub lr: f64,
    pub wallclock_s: f64,
}

impl EpochRecord {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.metric, self.lr, self.wallclock_s
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Wallclock is written as 0 when false, making logs bit-identical
    /// across replays.
    pub record_wallclock: bool,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub records: Vec<EpochRecord>,
    /// `None` when no epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_metric: Option<f64>,
    pub best_model: GrassModel,
    pub final_model: GrassModel,
    pub metrics_path: PathBuf,
    pub best_checkpoint: PathBuf,
    pub last_checkpoint: PathBuf,
}

struct MetricLog {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricLog {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| GrassError::io(path, e))?;
        let mut log = MetricLog {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        };
        log.line(METRICS_HEADER)?;
        Ok(log)
    }

    fn line(&mut self, text: &str) -> Result<()> {
        writeln!(self.out, "{text}")
            .and_then(|_| self.out.flush())
            .map_err(|e| GrassError::io(&self.path, e))
    }
}

/// Number of optimizer updates per epoch.
pub fn steps_per_epoch(train_graphs: usize, batch_size: usize) -> usize {
    train_graphs.div_ceil(batch_size.max(1))
}

/// Trains from a fresh initialization. Writes `metrics.csv`, `best.ckpt`
/// (best validation metric; the initial model when no epoch runs) and
/// `last.ckpt` into `opts.out_dir`.
pub fn train_loop(
    cfg: &GrassConfig,
    train: &Dataset<'_>,
    val: &Dataset<'_>,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(invalid("training and validation sets must be non-empty"));
    }
    train.check_against(cfg)?;
    val.check_against(cfg)?;
    std::fs::create_dir_all(&opts.out_dir).map_err(|e| GrassError::io(&opts.out_dir, e))?;
    let metrics_path = opts.out_dir.join("metrics.csv");
    let best_checkpoint = opts.out_dir.join("best.ckpt");
    let last_checkpoint = opts.out_dir.join("last.ckpt");
    let mut log = MetricLog::create(&metrics_path)?;

    let tc = &cfg.train;
    let seed = opts.seed;
    let mut model = GrassModel::init(cfg, &mut derive_rng(seed, Stream::Init, &[]))?;
    let mut opt = Lion::new(&model, tc.beta1, tc.beta2, tc.weight_decay);
    let per_epoch = steps_per_epoch(train.len(), tc.batch_size);
    let schedule = Schedule::new(tc, tc.epochs * per_epoch);
    let task = cfg.model.task;

    let mut best_model = model.clone();
    let mut best: Option<(usize, f64)> = None;
    let mut records = Vec::new();
    let mut step = 0usize;
    let start = Instant::now();
    save_checkpoint(&best_model, &best_checkpoint)?;

    for epoch in 1..=tc.epochs {
        let ep = epoch as u64;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut derive_rng(seed, Stream::Shuffle, &[ep]));
        let (mut loss_sum, mut rows, mut metric_sum, mut metric_count) = (0.0, 0usize, 0.0, 0usize);
        let mut lr = schedule.lr_at(step);
        for (b, chunk) in order.chunks(tc.batch_size).enumerate() {
            let batch = prepare_batch(train, chunk, &cfg.rewire, cfg.rrwp.enabled, |i| {
                derive_rng(seed, Stream::Rewire, &[ep, i as u64])
            })?;
            let mut mask_rng = derive_rng(seed, Stream::DropKey, &[ep, b as u64]);
            let (out, cache) = model.forward(&batch, Mode::Train, &mut mask_rng)?;
            let lo = batch_loss(task, &out.predictions, &batch.targets, tc.label_smoothing)?;
            if !lo.loss.is_finite() {
                return Err(GrassError::NonFinite {
                    context: format!("epoch {epoch}, batch {b}"),
                    message: format!("loss = {}", lo.loss),
                });
            }
            let grad = model.backward(&batch, &cache, &lo.grad);
            lr = schedule.lr_at(step);
            opt.step(&mut model, &grad, lr)?;
            model.commit_running_stats(&cache);
            step += 1;
            loss_sum += lo.loss * lo.rows as f64;
            rows += lo.rows;
            metric_sum += lo.metric_sum;
            metric_count += lo.metric_count;
        }
        let wall = if opts.record_wallclock {
            start.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let train_rec = EpochRecord {
            epoch,
            split: Split::Train,
            loss: loss_sum / rows.max(1) as f64,
            metric: metric_sum / metric_count.max(1) as f64,
            lr,
            wallclock_s: wall,
        };
        let v = evaluate(&model, val, tc.batch_size, seed, ep)?;
        let val_rec = EpochRecord {
            split: Split::Val,
            loss: v.loss,
            metric: v.metric,
            ..train_rec
        };
        log.line(&train_rec.csv_line())?;
        log.line(&val_rec.csv_line())?;
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>5}  train loss {:.5} metric {:.5}  val loss {:.5} metric {:.5}  lr {:.3e}",
                train_rec.loss, train_rec.metric, v.loss, v.metric, lr
            );
        }
        records.push(train_rec);
        records.push(val_rec);
        if best.is_none_or(|(_, m)| loss::improves(task, v.metric, m)) {
            best = Some((epoch, v.metric));
            best_model = model.clone();
            save_checkpoint(&best_model, &best_checkpoint)?;
        }
    }
    save_checkpoint(&model, &last_checkpoint)?;
    Ok(TrainSummary {
        records,
        best_epoch: best.map(|(e, _)| e),
        best_val_metric: best.map(|(_, m)| m),
        best_model,
        final_model: model,
        metrics_path,
        best_checkpoint,
        last_checkpoint,
    })
}
