//! The `grass` command line: preprocessing, training, evaluation and
//! analysis subcommands over the `grass` library.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 data, cache,
//! checkpoint or I/O error, 4 numeric error.

pub mod manifest;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use grass::config::{GrassConfig, Task};
use grass::dataset::{file_sha256, hex, read_jsonl, synthetic_molecules, validate_dataset, write_jsonl, Sample, Target};
use grass::encode::cache::{compute_encodings, load_cache_for, precompute_cache, CacheStatus, GraphEncoding};
use grass::graph::random_connected_graph;
use grass::model::checkpoint::load_checkpoint;
use grass::model::{GrassModel, PreparedBatch};
use grass::nn::Parameters;
use grass::rewire::{diameter, sample_permutation_pseudograph, simplify, spectral_gap, MAX_SIMPLE_RETRIES};
use grass::seed::{derive_rng, Stream};
use grass::train::{evaluate, grad_check_model, prepare_batch, train_loop, Dataset, GradCheckOptions, TrainOptions};
use grass::{GrassError, Result};

use manifest::{append_manifest, unix_now, RunManifest, Seeds};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Environment variable forcing single-threaded, bit-reproducible runs.
pub const DETERMINISTIC_ENV: &str = "GRASS_DETERMINISTIC";

#[derive(Debug, Parser)]
#[command(name = "grass", version, about = "Graph learning with random-regular rewiring and edge-mediated attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Precompute random-walk and degree encodings for a dataset.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        /// Random-walk length.
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: all cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Train a model; writes metrics.csv, best.ckpt, last.ckpt and appends to manifests.jsonl in --out.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cache written by `preprocess` for --data.
        #[arg(long)]
        cache: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Run directory.
        #[arg(long)]
        out: PathBuf,
        /// Validation set (default: the training set).
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Cache for --val-data (default: encodings computed in memory).
        #[arg(long, requires = "val_data")]
        val_cache: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint under random rewiring.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Cache for --data (default: encodings computed in memory).
        #[arg(long)]
        cache: Option<PathBuf>,
        /// Rewiring seed; a fresh one is drawn when absent.
        #[arg(long)]
        fixed_eval_seed: Option<u64>,
        /// Independent rewiring passes.
        #[arg(long, default_value_t = 1)]
        passes: usize,
    },
    /// Sample random regular graphs and print trial,simple,diameter,spectral_gap as CSV.
    RewireStats {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        r: usize,
        #[arg(long)]
        trials: usize,
        #[arg(long)]
        seed: u64,
        /// Re-sample until the pseudograph is simple.
        #[arg(long)]
        retry_until_simple: bool,
    },
    /// Compare analytic and finite-difference gradients of a configured model.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random graphs in the probe batch.
        #[arg(long, default_value_t = 1)]
        graphs: usize,
        /// Nodes per random graph.
        #[arg(long, default_value_t = 5)]
        nodes: usize,
        /// Entries probed per parameter block (0 = all).
        #[arg(long, default_value_t = 8)]
        entries: usize,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Check a dataset file against the JSONL schema and print summary counts.
    ValidateData {
        #[arg(long)]
        data: PathBuf,
    },
    /// Write molecule-like graphs in the ZINC layout.
    MakeSynthetic {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit category of a library error.
pub fn exit_code(e: &GrassError) -> i32 {
    match e {
        GrassError::Validation(_) | GrassError::Config(_) => EXIT_USAGE,
        GrassError::Numeric { .. } | GrassError::NonFinite { .. } => EXIT_NUMERIC,
        GrassError::Data { .. }
        | GrassError::CacheInvalid(_)
        | GrassError::CacheMissing(_)
        | GrassError::Checkpoint(_)
        | GrassError::Io { .. } => EXIT_DATA,
    }
}

/// Entry point used by the binary: real stdout/stderr, determinism from the
/// environment.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let deterministic = std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1");
    run(argv, deterministic, &mut std::io::stdout(), &mut std::io::stderr())
}

/// Parses `argv` and runs the subcommand, writing reports to `out` and
/// diagnostics to `err`. Returns the exit code.
pub fn run<I, T>(argv: I, deterministic: bool, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if code == EXIT_OK {
                write!(out, "{text}")
            } else {
                write!(err, "{text}")
            };
            return code;
        }
    };
    match execute(cli.command, deterministic, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn io_out(e: std::io::Error) -> GrassError {
    GrassError::io("<stdout>", e)
}

fn execute(cmd: Command, deterministic: bool, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Preprocess { data, k, out: path, jobs } => preprocess(&data, k, &path, jobs, deterministic, out),
        Command::Train {
            config,
            data,
            cache,
            seed,
            out: dir,
            val_data,
            val_cache,
            quiet,
        } => train(
            &TrainArgs {
                config,
                data,
                cache,
                seed,
                dir,
                val_data,
                val_cache,
                verbose: !quiet,
            },
            deterministic,
            out,
        ),
        Command::Eval {
            checkpoint,
            data,
            cache,
            fixed_eval_seed,
            passes,
        } => eval(&checkpoint, &data, cache.as_deref(), fixed_eval_seed, passes, out),
        Command::RewireStats {
            n,
            r,
            trials,
            seed,
            retry_until_simple,
        } => rewire_stats(n, r, trials, seed, retry_until_simple, out),
        Command::Gradcheck {
            config,
            seed,
            graphs,
            nodes,
            entries,
            tolerance,
        } => gradcheck(&config, seed, graphs, nodes, entries, tolerance, out),
        Command::ValidateData { data } => validate(&data, out, err),
        Command::MakeSynthetic { count, seed, out: path } => {
            write_jsonl(&path, &synthetic_molecules(count, seed))?;
            writeln!(out, "wrote {count} graphs to {}", path.display()).map_err(io_out)
        }
    }
}

fn preprocess(
    data: &Path,
    k: usize,
    path: &Path,
    jobs: Option<usize>,
    deterministic: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let threads = if deterministic { Some(1) } else { jobs };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| GrassError::Config(format!("cannot start {threads:?} workers: {e}")))?;
    let status = pool.install(|| precompute_cache(data, k, path))?;
    let verb = match status {
        CacheStatus::Hit => "up to date",
        CacheStatus::Written => "written",
    };
    writeln!(out, "cache {verb}: {}", path.display()).map_err(io_out)
}

struct TrainArgs {
    config: PathBuf,
    data: PathBuf,
    cache: PathBuf,
    seed: u64,
    dir: PathBuf,
    val_data: Option<PathBuf>,
    val_cache: Option<PathBuf>,
    verbose: bool,
}

/// Samples and encodings of a dataset, with the cache contents checked
/// against the file.
fn load_with_cache(data: &Path, cache: &Path, k: usize) -> Result<(Vec<Sample>, Vec<GraphEncoding>, [u8; 32])> {
    let samples = read_jsonl(data)?;
    let hash = file_sha256(data)?;
    let encodings = load_cache_for(cache, &hash, k, &samples)?.graphs;
    Ok((samples, encodings, hash))
}

fn load_in_memory(data: &Path, k: usize) -> Result<(Vec<Sample>, Vec<GraphEncoding>, [u8; 32])> {
    let samples = read_jsonl(data)?;
    let hash = file_sha256(data)?;
    let encodings = compute_encodings(&samples, k)?;
    Ok((samples, encodings, hash))
}

fn train(args: &TrainArgs, deterministic: bool, out: &mut dyn Write) -> Result<()> {
    let started_at = unix_now();
    let cfg = GrassConfig::load(&args.config)?;
    let k = cfg.rrwp.k;
    let (train_samples, train_enc, data_hash) = load_with_cache(&args.data, &args.cache, k)?;
    let cache_hash = file_sha256(&args.cache)?;
    let val = match (&args.val_data, &args.val_cache) {
        (Some(d), Some(c)) => Some(load_with_cache(d, c, k)?),
        (Some(d), None) => Some(load_in_memory(d, k)?),
        _ => None,
    };
    let train_set = Dataset::new(&train_samples, &train_enc)?;
    let val_set = match &val {
        Some((s, e, _)) => Dataset::new(s, e)?,
        None => {
            writeln!(out, "no --val-data given: validating on the training set").map_err(io_out)?;
            train_set
        }
    };
    let opts = TrainOptions {
        seed: args.seed,
        out_dir: args.dir.clone(),
        record_wallclock: !deterministic,
        verbose: args.verbose,
    };
    let summary = train_loop(&cfg, &train_set, &val_set, &opts)?;
    let manifest = RunManifest {
        config: cfg.to_toml_string(),
        dataset_sha256: hex(&data_hash),
        cache_sha256: hex(&cache_hash),
        val_dataset_sha256: val.as_ref().map(|(_, _, h)| hex(h)),
        seeds: Seeds { run: args.seed },
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        deterministic,
        started_at: if deterministic { 0.0 } else { started_at },
        finished_at: if deterministic { 0.0 } else { unix_now() },
        best_epoch: summary.best_epoch,
        best_val_metric: summary.best_val_metric,
    };
    append_manifest(&args.dir.join("manifests.jsonl"), &manifest)?;
    let metric = metric_name(cfg.model.task);
    match (summary.best_epoch, summary.best_val_metric) {
        (Some(e), Some(m)) => writeln!(out, "best epoch {e}: val {metric} {m}"),
        _ => writeln!(out, "no epochs run; saved the initial model"),
    }
    .map_err(io_out)?;
    writeln!(out, "params {}", summary.final_model.num_parameters()).map_err(io_out)?;
    writeln!(out, "metrics {}", summary.metrics_path.display()).map_err(io_out)?;
    writeln!(out, "checkpoint {}", summary.best_checkpoint.display()).map_err(io_out)
}

fn metric_name(task: Task) -> &'static str {
    if task.is_classification() {
        "accuracy"
    } else {
        "mae"
    }
}

fn eval(
    checkpoint: &Path,
    data: &Path,
    cache: Option<&Path>,
    fixed_seed: Option<u64>,
    passes: usize,
    out: &mut dyn Write,
) -> Result<()> {
    if passes == 0 {
        return Err(GrassError::Validation("--passes must be at least 1".into()));
    }
    let model = load_checkpoint(checkpoint)?;
    let k = model.config.rrwp.k;
    let (samples, enc, _) = match cache {
        Some(c) => load_with_cache(data, c, k)?,
        None => load_in_memory(data, k)?,
    };
    let ds = Dataset::new(&samples, &enc)?;
    let seed = fixed_seed.unwrap_or_else(rand::random);
    let metric = metric_name(model.config.model.task);
    writeln!(out, "eval_seed {seed}").map_err(io_out)?;
    let mut values = Vec::with_capacity(passes);
    for pass in 0..passes {
        let r = evaluate(&model, &ds, model.config.train.batch_size, seed, pass as u64)?;
        writeln!(out, "pass {pass} loss {} {metric} {}", r.loss, r.metric).map_err(io_out)?;
        values.push(r.metric);
    }
    let mean = values.iter().sum::<f64>() / passes as f64;
    let var = if passes > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (passes - 1) as f64
    } else {
        0.0
    };
    writeln!(out, "mean {metric} {mean} variance {var} over {passes} passes").map_err(io_out)
}

fn rewire_stats(n: usize, r: usize, trials: usize, seed: u64, retry: bool, out: &mut dyn Write) -> Result<()> {
    writeln!(out, "trial,simple,diameter,spectral_gap").map_err(io_out)?;
    for trial in 0..trials {
        let mut rng = derive_rng(seed, Stream::Rewire, &[trial as u64]);
        let mut pg = sample_permutation_pseudograph(n, r, &mut rng)?;
        let mut attempts = 1;
        while retry && !pg.is_simple() && attempts < MAX_SIMPLE_RETRIES {
            pg = sample_permutation_pseudograph(n, r, &mut rng)?;
            attempts += 1;
        }
        let edges = simplify(&pg);
        let diam = diameter(&edges, n).map_or_else(|| "inf".to_string(), |d| d.to_string());
        let gap = spectral_gap(&edges, n)?;
        writeln!(out, "{trial},{},{diam},{gap}", pg.is_simple()).map_err(io_out)?;
    }
    Ok(())
}

/// A target of the right kind for `task`; values do not enter a gradient check.
fn placeholder_target(cfg: &GrassConfig, nodes: usize) -> Target {
    match cfg.model.task {
        Task::GraphRegression => Target::Values(vec![0.0; cfg.model.out_dim]),
        Task::GraphClassification => Target::Class(0),
        Task::NodeClassification => Target::Values(vec![0.0; nodes]),
    }
}

fn gradcheck(
    config: &Path,
    seed: u64,
    graphs: usize,
    nodes: usize,
    entries: usize,
    tolerance: f64,
    out: &mut dyn Write,
) -> Result<()> {
    if graphs == 0 || nodes == 0 {
        return Err(GrassError::Validation("--graphs and --nodes must be positive".into()));
    }
    let cfg = GrassConfig::load(config)?;
    let model = GrassModel::init(&cfg, &mut derive_rng(seed, Stream::Init, &[]))?;
    let mut rng = derive_rng(seed, Stream::Data, &[]);
    let samples: Vec<Sample> = (0..graphs)
        .map(|_| Sample {
            graph: random_connected_graph(nodes, 2, cfg.model.node_features, cfg.model.edge_features, &mut rng),
            target: placeholder_target(&cfg, nodes),
        })
        .collect();
    let enc = compute_encodings(&samples, cfg.rrwp.k)?;
    let ds = Dataset::new(&samples, &enc)?;
    let indices: Vec<usize> = (0..graphs).collect();
    let batch: PreparedBatch = prepare_batch(&ds, &indices, &cfg.rewire, cfg.rrwp.enabled, |i| {
        derive_rng(seed, Stream::Rewire, &[i as u64])
    })?;
    let opts = GradCheckOptions {
        max_entries_per_block: (entries > 0).then_some(entries),
        ..GradCheckOptions::with_tolerance(tolerance)
    };
    let report = grad_check_model(&model, &batch, &opts, &mut derive_rng(seed, Stream::DropKey, &[]))?;
    write!(out, "{}", report.render()).map_err(io_out)?;
    if report.passed() {
        Ok(())
    } else {
        let worst = report.failures().map(|b| b.name.as_str()).collect::<Vec<_>>().join(", ");
        Err(GrassError::NonFinite {
            context: "gradient check".into(),
            message: format!("blocks above tolerance: {worst}"),
        })
    }
}

fn validate(data: &Path, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let report = validate_dataset(data)?;
    let dim = |d: Option<usize>| d.map_or_else(|| "-".to_string(), |d| d.to_string());
    writeln!(
        out,
        "graphs {}\navg_nodes {:.2}\navg_edges {:.2}\nnode_feature_dim {}\nedge_feature_dim {}",
        report.graphs,
        report.avg_nodes,
        report.avg_edges,
        dim(report.node_feature_dim),
        dim(report.edge_feature_dim)
    )
    .map_err(io_out)?;
    for (line, field, message) in &report.errors {
        let _ = writeln!(err, "line {line}, field `{field}`: {message}");
    }
    match report.errors.first() {
        None => Ok(()),
        Some((line, field, message)) => Err(GrassError::Data {
            line: *line,
            field: field.clone(),
            message: format!("{message} ({} malformed lines)", report.errors.len()),
        }),
    }
}
