use std::path::Path;

use grass_cli::manifest::read_manifests;
use grass_cli::{run, EXIT_DATA, EXIT_OK, EXIT_USAGE};

/// Runs the CLI in deterministic mode, returning (code, stdout, stderr).
fn grass(args: &[&str]) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("grass").chain(args.iter().copied());
    let code = run(argv, true, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_CONFIG: &str = r#"
[model]
task = "graph-regression"
layers = 2
dim = 8
head_hidden = 8
out_dim = 1
node_features = 28
edge_features = 4
activation = "silu"
attention_eps = 1e-5
logit_clamp = 40.0
log_length_scaling = false

[encode]
degree_mode = "auto"
max_out_degree = 4
max_in_degree = 4
bn_eps = 1e-5
bn_momentum = 0.1

[rrwp]
enabled = true
k = 4

[rewire]
r = 2
retry_until_simple = false

[dropkey]
rate = 0.1

[edge_flip]
enabled = true

[norm]
kind = "pnv"
eps = 1e-5
momentum = 0.1

[pool]
kind = "sum"

[train]
epochs = 2
batch_size = 4
warmup_ratio = 0.1
lr_init = 1e-7
lr_peak = 5e-4
lr_final = 1e-7
beta1 = 0.95
beta2 = 0.98
weight_decay = 0.3
label_smoothing = 0.0
"#;

#[test]
fn help_exits_zero_with_usage() {
    let (code, out, _) = grass(&["--help"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("Usage"));
    for sub in ["preprocess", "train", "eval", "rewire-stats", "gradcheck", "validate-data"] {
        assert!(out.contains(sub), "{sub} missing from usage");
    }
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(grass(&["frobnicate"]).0, EXIT_USAGE);
    let (code, _, err) = grass(&["rewire-stats", "--n", "4", "--r", "2", "--trials", "1", "--seed", "0", "--bogus"]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("--bogus"));
}

#[test]
fn preprocess_missing_file_is_a_data_error_naming_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let (code, _, err) = grass(&["preprocess", "--data", p(&missing), "--k", "4", "--out", p(&dir.path().join("c.bin"))]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("nope.jsonl"));
}

#[test]
fn validate_data_reports_statistics_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("zinc.jsonl");
    assert_eq!(grass(&["make-synthetic", "--count", "300", "--seed", "1", "--out", p(&data)]).0, EXIT_OK);
    let (code, out, _) = grass(&["validate-data", "--data", p(&data)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("graphs 300"));

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let (code, out, _) = grass(&["validate-data", "--data", p(&empty)]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("graphs 0"));

    let wrong = dir.path().join("wrong.jsonl");
    std::fs::write(&wrong, "{\"schema\":\"grass-jsonl/999\"}\n").unwrap();
    assert_eq!(grass(&["validate-data", "--data", p(&wrong)]).0, EXIT_DATA);

    let text = std::fs::read_to_string(&data).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[3] = "{\"num_nodes\": \"three\"}";
    let broken = dir.path().join("broken.jsonl");
    std::fs::write(&broken, lines.join("\n")).unwrap();
    let (code, _, err) = grass(&["validate-data", "--data", p(&broken)]);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("line 4"));
}

#[test]
fn rewire_stats_prints_csv() {
    let (code, out, _) = grass(&["rewire-stats", "--n", "30", "--r", "4", "--trials", "5", "--seed", "3"]);
    assert_eq!(code, EXIT_OK);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "trial,simple,diameter,spectral_gap");
    assert_eq!(lines.len(), 6);
    for (i, line) in lines[1..].iter().enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[0], i.to_string());
        assert!(cols[1] == "true" || cols[1] == "false");
        assert!(cols[3].parse::<f64>().unwrap() >= 0.0);
    }
    let (code, out, _) = grass(&["rewire-stats", "--n", "30", "--r", "4", "--trials", "3", "--seed", "3", "--retry-until-simple"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.lines().skip(1).all(|l| l.split(',').nth(1) == Some("true")));
    assert_eq!(grass(&["rewire-stats", "--n", "10", "--r", "3", "--trials", "1", "--seed", "0"]).0, EXIT_USAGE);
}

#[test]
fn gradcheck_passes_on_a_preset() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.toml");
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    let (code, out, err) = grass(&["gradcheck", "--config", p(&cfg), "--entries", "3"]);
    assert_eq!(code, EXIT_OK, "{out}{err}");
    assert!(out.contains("PASS"));
}

#[test]
fn preprocess_train_eval_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let (data, val, cache, cfg, run) = (
        dir.path().join("train.jsonl"),
        dir.path().join("val.jsonl"),
        dir.path().join("train.grwp"),
        dir.path().join("tiny.toml"),
        dir.path().join("run"),
    );
    std::fs::write(&cfg, TINY_CONFIG).unwrap();
    assert_eq!(grass(&["make-synthetic", "--count", "12", "--seed", "1", "--out", p(&data)]).0, EXIT_OK);
    assert_eq!(grass(&["make-synthetic", "--count", "6", "--seed", "2", "--out", p(&val)]).0, EXIT_OK);

    let train_args = [
        "train", "--config", p(&cfg), "--data", p(&data), "--cache", p(&cache), "--seed", "7", "--out", p(&run),
        "--val-data", p(&val), "--quiet",
    ];
    let (code, _, err) = grass(&train_args);
    assert_eq!(code, EXIT_DATA);
    assert!(err.contains("preprocess"), "{err}");

    let (code, out, _) = grass(&["preprocess", "--data", p(&data), "--k", "4", "--out", p(&cache), "--jobs", "2"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.contains("written"));
    let (_, out, _) = grass(&["preprocess", "--data", p(&data), "--k", "4", "--out", p(&cache)]);
    assert!(out.contains("up to date"));

    let (code, out, err) = grass(&train_args);
    assert_eq!(code, EXIT_OK, "{err}");
    assert!(out.contains("best epoch"));
    let log1 = std::fs::read(run.join("metrics.csv")).unwrap();
    let (code, _, _) = grass(&train_args);
    assert_eq!(code, EXIT_OK);
    assert_eq!(std::fs::read(run.join("metrics.csv")).unwrap(), log1);
    let manifests = read_manifests(&run.join("manifests.jsonl")).unwrap();
    assert_eq!(manifests.len(), 2);
    assert_eq!(manifests[0], manifests[1]);
    assert_eq!(manifests[0].seeds.run, 7);

    let ckpt = run.join("best.ckpt");
    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&ckpt), "--data", p(&val)];
        args.extend_from_slice(extra);
        grass(&args)
    };
    let (code, a, _) = eval(&["--fixed-eval-seed", "11", "--passes", "3"]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(a, eval(&["--fixed-eval-seed", "11", "--passes", "3"]).1);
    assert!(a.starts_with("eval_seed 11\n"));
    assert_eq!(a.lines().filter(|l| l.starts_with("pass ")).count(), 3);
    let (code, _, _) = eval(&[]);
    assert_eq!(code, EXIT_OK);

    let mut corrupt = std::fs::read(&ckpt).unwrap();
    corrupt[40] ^= 1;
    std::fs::write(&ckpt, corrupt).unwrap();
    assert_eq!(eval(&["--fixed-eval-seed", "1"]).0, EXIT_DATA);
}

#[test]
fn invalid_config_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, TINY_CONFIG.replace("r = 2\n", "r = 5\n")).unwrap();
    let (code, _, err) = grass(&["gradcheck", "--config", p(&cfg)]);
    assert_eq!(code, EXIT_USAGE);
    assert!(err.contains("bad.toml"));
}

#[test]
fn shipped_presets_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut count = 0;
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        grass::config::GrassConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        count += 1;
    }
    assert!(count >= 10);
}
