//! Graph bundles on disk, network partitioning, target splits, few-shot
//! label selection, contamination control and the synthetic generator.
//!
//! A bundle is a directory with:
//!
//! * `edges.tsv`: `u<TAB>v` per line, 0-based ids, each pair once
//! * `features.csv`: one row of `d` comma-separated reals per node
//! * `labels.csv`: `node_id,1` per ground-truth anomaly
//! * `meta.json`: `{"n": .., "d": .., "name": ..}`
//! * `anomaly_types.csv` (optional): `node_id,structural|contextual`

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::{index, SliceRandom};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{AttributedGraph, BuildWarnings};
use crate::inject::AnomalyKind;
use crate::meta::Task;
use crate::rng::Rng;

pub const EDGES_FILE: &str = "edges.tsv";
pub const FEATURES_FILE: &str = "features.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const META_FILE: &str = "meta.json";
pub const TYPES_FILE: &str = "anomaly_types.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    pub n: usize,
    pub d: usize,
    pub name: String,
}

/// A graph with its ground-truth anomaly labels.
#[derive(Debug, Clone)]
pub struct LabeledGraph {
    pub name: String,
    pub graph: AttributedGraph,
    /// Sorted anomalous node indices.
    pub anomalies: Vec<usize>,
    pub kinds: Option<BTreeMap<usize, AnomalyKind>>,
}

impl LabeledGraph {
    pub fn is_anomaly(&self) -> Vec<bool> {
        let mut mask = vec![false; self.graph.num_nodes()];
        for &i in &self.anomalies {
            mask[i] = true;
        }
        mask
    }
}

#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub labeled: LabeledGraph,
    pub warnings: BuildWarnings,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_id(path: &Path, line: usize, token: &str, n: usize) -> Result<usize> {
    let id: usize = token
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("invalid node id {token:?}")))?;
    if id >= n {
        return Err(parse_err(path, line, format!("node id {id} out of range (n = {n})")));
    }
    Ok(id)
}

/// Reads a bundle directory. Duplicate edges and self-loops are repaired
/// and counted; anything else inconsistent is an error.
pub fn load_bundle(dir: &Path) -> Result<LoadedBundle> {
    let meta_path = dir.join(META_FILE);
    let meta: BundleMeta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| parse_err(&meta_path, e.line(), e.to_string()))?;

    let feat_path = dir.join(FEATURES_FILE);
    let mut values = Vec::with_capacity(meta.n * meta.d);
    let mut rows = 0;
    for (line, text) in lines(&read(&feat_path)?) {
        let before = values.len();
        for tok in text.split(',') {
            let v: f64 = tok
                .trim()
                .parse()
                .map_err(|_| parse_err(&feat_path, line, format!("invalid number {tok:?}")))?;
            if !v.is_finite() {
                return Err(parse_err(&feat_path, line, "non-finite feature value"));
            }
            values.push(v);
        }
        if values.len() - before != meta.d {
            return Err(parse_err(
                &feat_path,
                line,
                format!("expected {} values, found {}", meta.d, values.len() - before),
            ));
        }
        rows += 1;
    }
    if rows != meta.n {
        return Err(parse_err(
            &feat_path,
            rows,
            format!("{} feature rows for n = {}", rows, meta.n),
        ));
    }
    let features = Array2::from_shape_vec((meta.n, meta.d), values).expect("shape checked");

    let edge_path = dir.join(EDGES_FILE);
    let mut edges = Vec::new();
    for (line, text) in lines(&read(&edge_path)?) {
        let mut parts = text.split(['\t', ' ']).filter(|t| !t.is_empty());
        let (Some(u), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
            return Err(parse_err(&edge_path, line, "expected two node ids"));
        };
        edges.push((
            parse_id(&edge_path, line, u, meta.n)?,
            parse_id(&edge_path, line, v, meta.n)?,
        ));
    }
    let (graph, warnings) = AttributedGraph::from_edges(meta.n, &edges, features)?;
    if warnings.total() > 0 {
        log::warn!(
            "{}: dropped {} duplicate edges and {} self-loops",
            dir.display(),
            warnings.duplicate_edges,
            warnings.self_loops
        );
    }

    let label_path = dir.join(LABELS_FILE);
    let mut anomalies = Vec::new();
    if label_path.exists() {
        for (line, text) in lines(&read(&label_path)?) {
            let (id, flag) = text
                .split_once(',')
                .ok_or_else(|| parse_err(&label_path, line, "expected node_id,label"))?;
            let id = parse_id(&label_path, line, id, meta.n)?;
            match flag.trim() {
                "1" => anomalies.push(id),
                "0" => {}
                other => return Err(parse_err(&label_path, line, format!("invalid label {other:?}"))),
            }
        }
    }
    anomalies.sort_unstable();
    anomalies.dedup();

    let types_path = dir.join(TYPES_FILE);
    let kinds = if types_path.exists() {
        let mut map = BTreeMap::new();
        for (line, text) in lines(&read(&types_path)?) {
            let (id, kind) = text
                .split_once(',')
                .ok_or_else(|| parse_err(&types_path, line, "expected node_id,type"))?;
            let id = parse_id(&types_path, line, id, meta.n)?;
            let kind = match kind.trim() {
                "structural" => AnomalyKind::Structural,
                "contextual" => AnomalyKind::Contextual,
                other => return Err(parse_err(&types_path, line, format!("unknown type {other:?}"))),
            };
            map.insert(id, kind);
        }
        Some(map)
    } else {
        None
    };

    Ok(LoadedBundle {
        labeled: LabeledGraph {
            name: meta.name,
            graph,
            anomalies,
            kinds,
        },
        warnings,
    })
}

fn write(path: PathBuf, text: String) -> Result<()> {
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

/// Writes a bundle directory, creating it if needed. Feature values are
/// written in shortest round-trip form, so loading reproduces them exactly.
pub fn save_bundle(dir: &Path, labeled: &LabeledGraph) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &labeled.graph;
    let meta = BundleMeta {
        n: g.num_nodes(),
        d: g.feature_dim(),
        name: labeled.name.clone(),
    };
    write(dir.join(META_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;

    let mut edges = String::new();
    for (u, v) in g.edge_list() {
        writeln!(edges, "{u}\t{v}").unwrap();
    }
    write(dir.join(EDGES_FILE), edges)?;

    let mut feats = String::new();
    for row in g.features().rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                feats.push(',');
            }
            write!(feats, "{v:?}").unwrap();
        }
        feats.push('\n');
    }
    write(dir.join(FEATURES_FILE), feats)?;

    let mut labels = String::new();
    for &i in &labeled.anomalies {
        writeln!(labels, "{i},1").unwrap();
    }
    write(dir.join(LABELS_FILE), labels)?;

    if let Some(kinds) = &labeled.kinds {
        let mut text = String::new();
        for (i, k) in kinds {
            writeln!(text, "{i},{}", k.as_str()).unwrap();
        }
        write(dir.join(TYPES_FILE), text)?;
    }
    Ok(())
}

/// One part of a partitioned network.
#[derive(Debug, Clone)]
pub struct Partition {
    pub labeled: LabeledGraph,
    /// Original node index of each local node.
    pub mapping: Vec<usize>,
}

/// Assigns nodes uniformly at random to `parts` groups whose sizes differ
/// by at most one and keeps only edges inside each group.
pub fn partition_network(source: &LabeledGraph, parts: usize, rng: &mut Rng) -> Result<Vec<Partition>> {
    let n = source.graph.num_nodes();
    if parts < 2 {
        return Err(Error::Config(format!("need at least 2 parts, got {parts}")));
    }
    if n < parts {
        return Err(Error::InsufficientNodes(format!("{n} nodes cannot fill {parts} parts")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let is_anomaly = source.is_anomaly();
    let (base, extra) = (n / parts, n % parts);
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let size = base + usize::from(p < extra);
        let mut members = order[start..start + size].to_vec();
        start += size;
        members.sort_unstable();
        let graph = source.graph.induced_subgraph(&members)?;
        let anomalies = members
            .iter()
            .enumerate()
            .filter(|(_, &orig)| is_anomaly[orig])
            .map(|(local, _)| local)
            .collect();
        let kinds = source.kinds.as_ref().map(|k| {
            members
                .iter()
                .enumerate()
                .filter_map(|(local, orig)| k.get(orig).map(|kind| (local, *kind)))
                .collect()
        });
        out.push(Partition {
            labeled: LabeledGraph {
                name: format!("{}-part{p}", source.name),
                graph,
                anomalies,
                kinds,
            },
            mapping: members,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub fine_tune_fraction: f64,
    pub validation_fraction: f64,
    pub test_fraction: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fine_tune_fraction: 0.4,
            validation_fraction: 0.2,
            test_fraction: 0.4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSplit {
    pub fine_tune: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Split sizes by largest remainder; ties go to the earlier split.
pub fn split_sizes(n: usize, spec: &SplitSpec) -> Result<[usize; 3]> {
    let fr = [spec.fine_tune_fraction, spec.validation_fraction, spec.test_fraction];
    if fr.iter().any(|f| !(*f > 0.0)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions must be positive and sum to 1, got {fr:?}")));
    }
    let quotas: Vec<f64> = fr.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for (s, q) in sizes.iter_mut().zip(&quotas) {
        *s = (q + 1e-9).floor() as usize;
    }
    let mut left = n - sizes.iter().sum::<usize>();
    let mut by_remainder: Vec<usize> = (0..3).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = quotas[a] - sizes[a] as f64;
        let rb = quotas[b] - sizes[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in &by_remainder {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Config(format!("{n} nodes leave an empty split ({sizes:?})")));
    }
    Ok(sizes)
}

/// Random disjoint fine-tune / validation / test cover of `nodes`.
pub fn split_target(nodes: &[usize], spec: &SplitSpec, rng: &mut Rng) -> Result<TargetSplit> {
    let [a, b, _] = split_sizes(nodes.len(), spec)?;
    let mut order = nodes.to_vec();
    order.shuffle(rng);
    let parts = |range: std::ops::Range<usize>| {
        let mut v = order[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(TargetSplit {
        fine_tune: parts(0..a),
        validation: parts(a..a + b),
        test: parts(a + b..nodes.len()),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShotSelection {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    /// Fraction of `unlabeled` that is anomalous.
    pub contamination: f64,
}

/// Picks `shots` labeled anomalies uniformly from the anomalies in `pool`;
/// every other node of `pool` becomes unlabeled.
pub fn select_shots(pool: &[usize], is_anomaly: &[bool], shots: usize, rng: &mut Rng) -> Result<ShotSelection> {
    if shots == 0 {
        return Err(Error::Config("at least one shot required".into()));
    }
    let anomalies: Vec<usize> = pool.iter().copied().filter(|&i| is_anomaly[i]).collect();
    if anomalies.len() < shots {
        return Err(Error::Config(format!(
            "{shots} shots requested, only {} anomalies available",
            anomalies.len()
        )));
    }
    let mut labeled: Vec<usize> = index::sample(rng, anomalies.len(), shots)
        .into_iter()
        .map(|k| anomalies[k])
        .collect();
    labeled.sort_unstable();
    let unlabeled: Vec<usize> = pool.iter().copied().filter(|i| labeled.binary_search(i).is_err()).collect();
    let hidden = unlabeled.iter().filter(|&&i| is_anomaly[i]).count();
    let contamination = if unlabeled.is_empty() {
        0.0
    } else {
        hidden as f64 / unlabeled.len() as f64
    };
    Ok(ShotSelection {
        labeled,
        unlabeled,
        contamination,
    })
}

pub fn contamination(unlabeled: &[usize], is_anomaly: &[bool]) -> f64 {
    if unlabeled.is_empty() {
        return 0.0;
    }
    unlabeled.iter().filter(|&&i| is_anomaly[i]).count() as f64 / unlabeled.len() as f64
}

/// Subsamples the unlabeled pool so anomalies make up `r_c` of it.
///
/// Lowering the ratio drops unlabeled anomalies; raising it drops normal
/// nodes. Nodes are never added or relabeled.
pub fn set_contamination(task: &Task, is_anomaly: &[bool], r_c: f64, rng: &mut Rng) -> Result<Task> {
    if !(0.0..1.0).contains(&r_c) {
        return Err(Error::Config(format!("contamination must be in [0, 1), got {r_c}")));
    }
    let (anom, normal): (Vec<usize>, Vec<usize>) =
        task.unlabeled().iter().partition(|&&i| is_anomaly[i]);
    let (a, m) = (anom.len(), normal.len());
    let current = a as f64 / (a + m).max(1) as f64;
    let (keep_a, keep_m) = if r_c <= current {
        (((r_c * m as f64) / (1.0 - r_c)).round() as usize, m)
    } else {
        if r_c > 0.0 && a == 0 {
            return Err(Error::Config("no unlabeled anomalies to reach a positive ratio".into()));
        }
        (a, ((a as f64 * (1.0 - r_c)) / r_c).round() as usize)
    };
    let keep_a = keep_a.min(a);
    let keep_m = keep_m.min(m);
    if keep_a == a && keep_m == m {
        return Ok(task.clone());
    }
    if keep_a + keep_m < task.labeled().len() || keep_a + keep_m == 0 {
        return Err(Error::Config(format!(
            "contamination {r_c} leaves only {} unlabeled nodes",
            keep_a + keep_m
        )));
    }
    let pick = |pool: &[usize], k: usize, rng: &mut Rng| -> Vec<usize> {
        index::sample(rng, pool.len(), k).into_iter().map(|j| pool[j]).collect()
    };
    let mut kept = pick(&anom, keep_a, rng);
    kept.extend(pick(&normal, keep_m, rng));
    kept.sort_unstable();
    task.with_unlabeled(kept)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    pub blocks: usize,
    pub intra_p: f64,
    pub inter_p: f64,
    pub feature_shift: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n: 2000,
            d: 32,
            blocks: 4,
            intra_p: 0.01,
            inter_p: 0.001,
            feature_shift: 8.0,
        }
    }
}

/// Block of node `i` when `n` nodes are split into `blocks` contiguous
/// near-equal ranges.
pub fn block_of(i: usize, n: usize, blocks: usize) -> usize {
    i * blocks / n
}

/// Stochastic block model with Gaussian node features.
///
/// Features of a node in block `b` are drawn from `N(feature_shift * e_(b mod d), I)`.
pub fn generate_synthetic(spec: &SyntheticSpec, rng: &mut Rng) -> Result<AttributedGraph> {
    let SyntheticSpec { n, d, blocks, intra_p, inter_p, feature_shift } = *spec;
    if blocks == 0 || n == 0 || d == 0 {
        return Err(Error::Config("n, d and blocks must be positive".into()));
    }
    for p in [intra_p, inter_p] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Config(format!("edge probability {p} outside [0, 1]")));
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        let bi = block_of(i, n, blocks);
        for j in i + 1..n {
            let p = if block_of(j, n, blocks) == bi { intra_p } else { inter_p };
            if rng.gen::<f64>() < p {
                edges.push((i, j));
            }
        }
    }
    let mut features = Array2::zeros((n, d));
    for i in 0..n {
        let shifted = block_of(i, n, blocks) % d;
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            features[[i, j]] = z + if j == shifted { feature_shift } else { 0.0 };
        }
    }
    Ok(AttributedGraph::from_edges(n, &edges, features)?.0)
}
