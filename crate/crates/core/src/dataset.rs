//! JSONL graph datasets.
//!
//! The first line is a header `{"schema": "grass-jsonl/1"}`; every following
//! non-blank line is one graph:
//!
//! ```text
//! {"num_nodes": 3, "edges": [[0,1],[1,2]], "directed": false,
//!  "node_feat": [[..],[..],[..]], "edge_feat": [[..],[..]], "target": [0.5]}
//! ```
//!
//! `target` is either an integer class or a list of numbers (regression
//! values, or one class per node for node-level tasks). Undirected edges are
//! listed once and symmetrized on load. A zero-byte file is an empty dataset.

use std::collections::VecDeque;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::error::{GrassError, Result};
use crate::graph::Graph;
use crate::seed::{derive_rng, Stream};

pub const SCHEMA: &str = "grass-jsonl/1";

/// Supervision attached to one graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    Values(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub graph: Graph,
    pub target: Target,
}

/// SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<[u8; 32]> {
    let mut file = File::open(path).map_err(|e| GrassError::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let read = file.read(&mut buf).map_err(|e| GrassError::io(path, e))?;
        if read == 0 {
            break;
        }
        hasher.update(&buf[..read]);
    }
    Ok(hasher.finalize().into())
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn data_err(line: usize, field: &str, message: impl Into<String>) -> GrassError {
    GrassError::Data {
        line,
        field: field.to_string(),
        message: message.into(),
    }
}

/// One parsed line before feature widths are reconciled across the file.
struct RawGraph {
    line: usize,
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    directed: bool,
    node_feat: Vec<Vec<f64>>,
    edge_feat: Vec<Vec<f64>>,
    target: Target,
}

fn matrix_field(obj: &Map<String, Value>, line: usize, field: &str) -> Result<Vec<Vec<f64>>> {
    let rows = obj
        .get(field)
        .and_then(Value::as_array)
        .ok_or_else(|| data_err(line, field, "missing or not an array"))?;
    rows.iter()
        .map(|row| {
            row.as_array()
                .ok_or_else(|| data_err(line, field, "rows must be arrays"))?
                .iter()
                .map(|v| {
                    v.as_f64()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| data_err(line, field, "entries must be finite numbers"))
                })
                .collect()
        })
        .collect()
}

fn parse_line(text: &str, line: usize) -> Result<RawGraph> {
    let value: Value = serde_json::from_str(text).map_err(|e| data_err(line, "<json>", e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| data_err(line, "<json>", "graph record must be an object"))?;
    const FIELDS: [&str; 6] = ["num_nodes", "edges", "directed", "node_feat", "edge_feat", "target"];
    if let Some(extra) = obj.keys().find(|k| !FIELDS.contains(&k.as_str())) {
        return Err(data_err(line, extra, "unknown field"));
    }
    let num_nodes = obj
        .get("num_nodes")
        .and_then(Value::as_u64)
        .ok_or_else(|| data_err(line, "num_nodes", "missing or not a non-negative integer"))? as usize;
    let edges = obj
        .get("edges")
        .and_then(Value::as_array)
        .ok_or_else(|| data_err(line, "edges", "missing or not an array"))?
        .iter()
        .map(|pair| match pair.as_array().map(|p| p.as_slice()) {
            Some([h, t]) => match (h.as_u64(), t.as_u64()) {
                (Some(h), Some(t)) if (h as usize) < num_nodes && (t as usize) < num_nodes => {
                    Ok((h as usize, t as usize))
                }
                _ => Err(data_err(line, "edges", format!("endpoint out of range for {num_nodes} nodes"))),
            },
            _ => Err(data_err(line, "edges", "each edge must be a [head, tail] pair")),
        })
        .collect::<Result<Vec<_>>>()?;
    let directed = obj
        .get("directed")
        .and_then(Value::as_bool)
        .ok_or_else(|| data_err(line, "directed", "missing or not a boolean"))?;
    let node_feat = matrix_field(obj, line, "node_feat")?;
    let edge_feat = matrix_field(obj, line, "edge_feat")?;
    if node_feat.len() != num_nodes {
        return Err(data_err(line, "node_feat", format!("{} rows for {num_nodes} nodes", node_feat.len())));
    }
    if edge_feat.len() != edges.len() {
        return Err(data_err(line, "edge_feat", format!("{} rows for {} edges", edge_feat.len(), edges.len())));
    }
    let target = match obj.get("target") {
        Some(Value::Number(n)) => Target::Class(
            n.as_u64()
                .ok_or_else(|| data_err(line, "target", "class targets must be non-negative integers"))?
                as usize,
        ),
        Some(Value::Array(vals)) => Target::Values(
            vals.iter()
                .map(|v| v.as_f64().filter(|x| x.is_finite()))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| data_err(line, "target", "entries must be finite numbers"))?,
        ),
        _ => return Err(data_err(line, "target", "missing, or neither an integer nor an array")),
    };
    Ok(RawGraph {
        line,
        num_nodes,
        edges,
        directed,
        node_feat,
        edge_feat,
        target,
    })
}

fn uniform_width(rows: &[Vec<f64>], line: usize, field: &str, width: &mut Option<usize>) -> Result<()> {
    for row in rows {
        match *width {
            None => *width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(data_err(line, field, format!("row of width {} where {w} was expected", row.len())))
            }
            _ => {}
        }
    }
    Ok(())
}

fn to_array(rows: &[Vec<f64>], width: usize) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), width), |(i, j)| rows[i][j])
}

fn check_header(first: Option<(usize, String)>) -> Result<()> {
    let Some((line, text)) = first else {
        return Ok(());
    };
    let value: Value = serde_json::from_str(&text).map_err(|e| data_err(line, "schema", e.to_string()))?;
    match value.get("schema").and_then(Value::as_str) {
        Some(SCHEMA) => Ok(()),
        Some(other) => Err(data_err(line, "schema", format!("unsupported schema {other:?}, expected {SCHEMA:?}"))),
        None => Err(data_err(line, "schema", "first line must be the schema header")),
    }
}

fn numbered_lines(path: &Path) -> Result<impl Iterator<Item = Result<(usize, String)>>> {
    let file = File::open(path).map_err(|e| GrassError::io(path, e))?;
    let owned = path.to_path_buf();
    Ok(BufReader::new(file)
        .lines()
        .enumerate()
        .map(move |(i, l)| l.map(|t| (i + 1, t)).map_err(|e| GrassError::io(&owned, e)))
        .filter(|r| r.as_ref().map_or(true, |(_, t)| !t.trim().is_empty())))
}

/// Reads and validates a whole dataset. The first malformed line aborts.
pub fn read_jsonl(path: &Path) -> Result<Vec<Sample>> {
    let mut lines = numbered_lines(path)?;
    check_header(lines.next().transpose()?)?;
    let raws = lines
        .map(|r| r.and_then(|(line, text)| parse_line(&text, line)))
        .collect::<Result<Vec<_>>>()?;
    assemble(raws)
}

fn assemble(raws: Vec<RawGraph>) -> Result<Vec<Sample>> {
    let (mut node_w, mut edge_w) = (None, None);
    for r in &raws {
        uniform_width(&r.node_feat, r.line, "node_feat", &mut node_w)?;
        uniform_width(&r.edge_feat, r.line, "edge_feat", &mut edge_w)?;
    }
    let (node_w, edge_w) = (node_w.unwrap_or(0), edge_w.unwrap_or(0));
    raws.into_iter()
        .map(|r| {
            let graph = Graph::build(
                r.num_nodes,
                &r.edges,
                to_array(&r.node_feat, node_w),
                to_array(&r.edge_feat, edge_w),
                r.directed,
            )
            .map_err(|e| data_err(r.line, "edges", e.to_string()))?;
            Ok(Sample {
                graph,
                target: r.target,
            })
        })
        .collect()
}

/// Writes samples in the JSONL format. Undirected graphs are written with one
/// entry per symmetrized pair (the even-indexed edges).
pub fn write_jsonl(path: &Path, samples: &[Sample]) -> Result<()> {
    let file = File::create(path).map_err(|e| GrassError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| GrassError::io(path, e);
    writeln!(w, "{}", json!({ "schema": SCHEMA })).map_err(io)?;
    for s in samples {
        let g = &s.graph;
        let step = if g.is_directed() { 1 } else { 2 };
        let idx: Vec<usize> = (0..g.num_edges()).step_by(step).collect();
        let edges: Vec<[usize; 2]> = idx.iter().map(|&e| [g.edges()[e].0, g.edges()[e].1]).collect();
        let rows = |a: &Array2<f64>, sel: &[usize]| -> Vec<Vec<f64>> { sel.iter().map(|&i| a.row(i).to_vec()).collect() };
        let all_nodes: Vec<usize> = (0..g.num_nodes()).collect();
        let target = match &s.target {
            Target::Class(c) => json!(c),
            Target::Values(v) => json!(v),
        };
        let record = json!({
            "num_nodes": g.num_nodes(),
            "edges": edges,
            "directed": g.is_directed(),
            "node_feat": rows(g.node_features(), &all_nodes),
            "edge_feat": rows(g.edge_features(), &idx),
            "target": target,
        });
        writeln!(w, "{record}").map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Summary of a dataset file; malformed lines are listed rather than fatal.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub graphs: usize,
    pub avg_nodes: f64,
    /// Edges as listed in the file: undirected pairs count once.
    pub avg_edges: f64,
    pub node_feature_dim: Option<usize>,
    pub edge_feature_dim: Option<usize>,
    /// `(line, field, message)` per rejected line.
    pub errors: Vec<(usize, String, String)>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Per-line schema check with summary counts. A wrong header is an error;
/// bad graph lines are collected in the report.
pub fn validate_dataset(path: &Path) -> Result<ValidationReport> {
    let mut lines = numbered_lines(path)?;
    check_header(lines.next().transpose()?)?;
    let mut report = ValidationReport {
        graphs: 0,
        avg_nodes: 0.0,
        avg_edges: 0.0,
        node_feature_dim: None,
        edge_feature_dim: None,
        errors: Vec::new(),
    };
    let (mut nodes, mut edges) = (0usize, 0usize);
    for item in lines {
        let (line, text) = item?;
        let parsed = parse_line(&text, line).and_then(|r| {
            uniform_width(&r.node_feat, line, "node_feat", &mut report.node_feature_dim)?;
            uniform_width(&r.edge_feat, line, "edge_feat", &mut report.edge_feature_dim)?;
            Ok(r)
        });
        match parsed {
            Ok(r) => {
                report.graphs += 1;
                nodes += r.num_nodes;
                edges += r.edges.len();
            }
            Err(GrassError::Data { line, field, message }) => report.errors.push((line, field, message)),
            Err(e) => return Err(e),
        }
    }
    if report.graphs > 0 {
        report.avg_nodes = nodes as f64 / report.graphs as f64;
        report.avg_edges = edges as f64 / report.graphs as f64;
    }
    Ok(report)
}

/// Number of atom types in the molecule-like synthetic data.
pub const ATOM_TYPES: usize = 28;
/// Number of bond types in the molecule-like synthetic data.
pub const BOND_TYPES: usize = 4;

/// Atom type index, sampling weight, valence cap and contribution to the
/// synthetic target.
const ATOMS: [(usize, f64, usize, f64); 9] = [
    (0, 0.72, 4, 0.35),  // C
    (1, 0.10, 3, -0.70), // N
    (2, 0.11, 2, -0.55), // O
    (3, 0.02, 1, 0.45),  // F
    (4, 0.02, 2, 0.60),  // S
    (5, 0.015, 1, 0.75), // Cl
    (6, 0.006, 1, 0.90), // Br
    (7, 0.004, 3, -0.20), // P
    (8, 0.005, 1, 1.10), // I
];

const SINGLE: usize = 0;
const DOUBLE: usize = 1;
const AROMATIC: usize = 3;

/// Molecule-like graphs in the ZINC layout: one-hot atoms (28 types), one-hot
/// bonds (4 types), about 23 atoms and 25 bonds on average, and a
/// deterministic logP-like regression target mixing additive atom terms with
/// ring, branching and polar-neighborhood terms.
pub fn synthetic_molecules(count: usize, seed: u64) -> Vec<Sample> {
    (0..count)
        .map(|idx| synthetic_molecule(&mut derive_rng(seed, Stream::Data, &[idx as u64])))
        .collect()
}

fn synthetic_molecule<R: Rng + ?Sized>(rng: &mut R) -> Sample {
    let n = (23.2 + 4.5 * normal(rng)).round().clamp(9.0, 38.0) as usize;
    let mut atoms: Vec<usize> = Vec::with_capacity(n);
    let mut degree = vec![0usize; n];
    let mut edges: Vec<(usize, usize, usize)> = Vec::new();
    let cap = |a: usize| ATOMS[a].2;
    let draw = |rng: &mut R| ATOMS.choose_weighted(rng, |a| a.1).expect("weights are positive").0;

    // random tree: attach each atom to an earlier one with spare valence,
    // never letting the spare valence of the tree drop to zero
    atoms.push(0);
    let mut spare = cap(0);
    for i in 1..n {
        let mut atom = draw(rng);
        if spare == 1 && cap(atom) < 2 {
            atom = 0;
        }
        atoms.push(atom);
        let open: Vec<usize> = (0..i).filter(|&j| degree[j] < cap(atoms[j])).collect();
        let parent = *open.choose(rng).expect("spare valence is positive");
        let bond = if cap(atom) >= 2 && cap(atoms[parent]) >= 2 && rng.random::<f64>() < 0.12 {
            DOUBLE
        } else {
            SINGLE
        };
        edges.push((parent, i, bond));
        degree[parent] += 1;
        degree[i] += 1;
        spare = spare - 1 + cap(atom) - 1;
    }
    let cap = |i: usize| ATOMS[atoms[i]].2;

    // ring closures between atoms four or five bonds apart
    let rings = (2.85 + 1.0 * normal(rng)).round().clamp(0.0, 5.0) as usize;
    for _ in 0..rings {
        for _attempt in 0..20 {
            let a = rng.random_range(0..n);
            if degree[a] >= cap(a) {
                continue;
            }
            let dist = bfs(n, &edges, a);
            let candidates: Vec<usize> = (0..n)
                .filter(|&b| (dist[b] == 4 || dist[b] == 5) && degree[b] < cap(b))
                .collect();
            if let Some(&b) = candidates.choose(rng) {
                let bond = if dist[b] == 5 && rng.random::<f64>() < 0.6 { AROMATIC } else { SINGLE };
                edges.push((a, b, bond));
                degree[a] += 1;
                degree[b] += 1;
                break;
            }
        }
    }

    let target = molecule_target(n, &atoms, &edges, &degree);
    let node_feat = Array2::from_shape_fn((n, ATOM_TYPES), |(i, t)| f64::from(u8::from(atoms[i] == t)));
    let edge_feat = Array2::from_shape_fn((edges.len(), BOND_TYPES), |(e, t)| f64::from(u8::from(edges[e].2 == t)));
    let pairs: Vec<_> = edges.iter().map(|&(a, b, _)| (a, b)).collect();
    let graph = Graph::build(n, &pairs, node_feat, edge_feat, false).expect("generator emits valid graphs");
    Sample {
        graph,
        target: Target::Values(vec![target]),
    }
}

fn molecule_target(n: usize, atoms: &[usize], edges: &[(usize, usize, usize)], degree: &[usize]) -> f64 {
    let additive: f64 = atoms.iter().map(|&a| ATOMS[a].3).sum();
    let aromatic = edges.iter().filter(|e| e.2 == AROMATIC).count() as f64;
    let double = edges.iter().filter(|e| e.2 == DOUBLE).count() as f64;
    let rings = (edges.len() + 1).saturating_sub(n) as f64;
    let branched = degree.iter().filter(|&&d| d >= 3).count() as f64;
    let polar = |a: usize| a == 1 || a == 2;
    // polar atoms with a polar neighbor within two bonds
    let mut polar_clusters = 0.0;
    for i in (0..n).filter(|&i| polar(atoms[i])) {
        let dist = bfs(n, edges, i);
        if (0..n).any(|j| j != i && dist[j] <= 2 && polar(atoms[j])) {
            polar_clusters += 1.0;
        }
    }
    let raw = 0.45 * additive + 0.25 * aromatic - 0.2 * double - 0.35 * branched - 0.6 * (rings - 2.0).max(0.0)
        + 0.4 * polar_clusters;
    raw - 2.0
}

fn bfs(n: usize, edges: &[(usize, usize, usize)], src: usize) -> Vec<usize> {
    let mut adj = vec![Vec::new(); n];
    for &(a, b, _) in edges {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut dist = vec![usize::MAX; n];
    dist[src] = 0;
    let mut queue = VecDeque::from([src]);
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    dist
}

fn normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
