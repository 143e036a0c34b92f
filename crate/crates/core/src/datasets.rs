//! Synthetic Colors and Triangles datasets and their JSON Lines files.
//!
//! Colors graphs carry one-hot colors plus a zero "transparency" channel and
//! are labelled by their green node count. Triangles graphs carry one-hot
//! degrees and are labelled by their triangle count, sampled per class so that
//! every label gets an equal share of each split.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{degree_onehot, DatasetSplit, Graph, SplitName, Topology};
use crate::seeding::substream;

pub const FORMAT_VERSION: u32 = 1;
/// Zero-based index of the green channel.
pub const GREEN: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Colors,
    Triangles,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Colors => "colors",
            Task::Triangles => "triangles",
        }
    }

    pub fn splits(self) -> &'static [SplitName] {
        match self {
            Task::Colors => &SplitName::ALL,
            Task::Triangles => &SplitName::ALL[..4],
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Inclusive node-count range, written as `[min, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeRange(pub usize, pub usize);

impl NodeRange {
    fn validate(self, what: &str) -> Result<()> {
        if self.0 == 0 || self.0 > self.1 {
            return Err(Error::Config(format!("{what}: invalid node range [{}, {}]", self.0, self.1)));
        }
        Ok(())
    }

    fn sample(self, rng: &mut impl Rng) -> usize {
        rng.random_range(self.0..=self.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ColorsConfig {
    /// Number of color channels (green is channel 1).
    pub dim: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub small_nodes: NodeRange,
    pub large_nodes: NodeRange,
    pub max_green: usize,
    pub p_edge: f64,
    /// Non-green LargeC colors, each `dim + 1` wide; defaults to every 0/1 vector off the green channel.
    pub largec_palette: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for ColorsConfig {
    fn default() -> Self {
        ColorsConfig {
            dim: 3,
            n_train: 500,
            n_val: 2500,
            n_test: 2500,
            small_nodes: NodeRange(4, 25),
            large_nodes: NodeRange(26, 200),
            max_green: 10,
            p_edge: 0.1,
            largec_palette: None,
            seed: 0,
        }
    }
}

impl ColorsConfig {
    pub fn feature_dim(&self) -> usize {
        self.dim + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config("colors dim must be at least 2".into()));
        }
        self.small_nodes.validate("colors small_nodes")?;
        self.large_nodes.validate("colors large_nodes")?;
        if !(0.0..=1.0).contains(&self.p_edge) {
            return Err(Error::Config(format!("p_edge {} outside [0, 1]", self.p_edge)));
        }
        if let Some(p) = &self.largec_palette {
            if p.is_empty() {
                return Err(Error::Config("largec_palette is empty".into()));
            }
            for c in p {
                if c.len() != self.feature_dim() || c[GREEN] != 0.0 || c.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::Config(format!(
                        "palette color {c:?} must have {} entries in [0, 1] and zero green",
                        self.feature_dim()
                    )));
                }
            }
        } else if self.dim > 10 {
            return Err(Error::Config("dim > 10 needs an explicit largec_palette".into()));
        }
        Ok(())
    }

    /// Non-green colors used outside LargeC: one-hot on every channel but green.
    pub fn train_palette(&self) -> Vec<Vec<f64>> {
        (0..self.dim).filter(|&c| c != GREEN).map(|c| onehot(self.feature_dim(), c)).collect()
    }

    /// Non-green colors used in LargeC.
    pub fn largec_palette(&self) -> Vec<Vec<f64>> {
        if let Some(p) = &self.largec_palette {
            return p.clone();
        }
        let free: Vec<usize> = (0..self.feature_dim()).filter(|&c| c != GREEN).collect();
        (0..1usize << free.len())
            .map(|mask| {
                let mut v = vec![0.0; self.feature_dim()];
                for (b, &c) in free.iter().enumerate() {
                    if mask >> b & 1 == 1 {
                        v[c] = 1.0;
                    }
                }
                v
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrianglesConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub small_nodes: NodeRange,
    pub large_nodes: NodeRange,
    pub min_label: usize,
    pub max_label: usize,
    /// Degree one-hot cap; the maximum training degree when unset.
    pub degree_cap: Option<usize>,
    /// Sampling attempts allowed per graph before the stratum is declared unreachable.
    pub attempts_per_graph: usize,
    pub seed: u64,
}

impl Default for TrianglesConfig {
    fn default() -> Self {
        TrianglesConfig {
            n_train: 30_000,
            n_val: 5_000,
            n_test: 5_000,
            small_nodes: NodeRange(4, 25),
            large_nodes: NodeRange(26, 100),
            min_label: 1,
            max_label: 10,
            degree_cap: None,
            attempts_per_graph: 10_000,
            seed: 0,
        }
    }
}

impl TrianglesConfig {
    pub fn desk() -> Self {
        TrianglesConfig { n_train: 5_000, n_val: 1_000, n_test: 1_000, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        self.small_nodes.validate("triangles small_nodes")?;
        self.large_nodes.validate("triangles large_nodes")?;
        if self.min_label == 0 || self.min_label > self.max_label {
            return Err(Error::Config("triangle labels must satisfy 1 <= min_label <= max_label".into()));
        }
        for r in [self.small_nodes, self.large_nodes] {
            if choose3(r.1) < self.max_label as u64 {
                return Err(Error::Config(format!(
                    "no graph with at most {} nodes has {} triangles",
                    r.1, self.max_label
                )));
            }
        }
        if self.attempts_per_graph == 0 {
            return Err(Error::Config("attempts_per_graph must be positive".into()));
        }
        Ok(())
    }
}

fn onehot(width: usize, at: usize) -> Vec<f64> {
    let mut v = vec![0.0; width];
    v[at] = 1.0;
    v
}

fn choose3(n: usize) -> u64 {
    let n = n as u64;
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

/// Triangle counts of a graph.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TriangleStats {
    pub total: u64,
    pub per_node: Vec<u64>,
}

/// Counts from a dense adjacency via `trace(A^3) / 6` and `(A^3)_ii / 2`.
pub fn count_triangles(a: &Tensor<f64>) -> Result<TriangleStats> {
    if a.rows() != a.cols() {
        return Err(Error::shape("count_triangles", a.shape(), (a.rows(), a.rows())));
    }
    let a2 = a.matmul(a)?;
    let n = a.rows();
    let mut per_node = Vec::with_capacity(n);
    let mut trace = 0.0;
    for i in 0..n {
        let d: f64 = (0..n).map(|k| a2.get(i, k) * a.get(k, i)).sum();
        if d.fract() != 0.0 || d < 0.0 || !(d as u64).is_multiple_of(2) {
            return Err(Error::Graph(format!("(A^3)_{i}{i} = {d} is not a nonnegative even integer")));
        }
        trace += d;
        per_node.push(d as u64 / 2);
    }
    if !(trace as u64).is_multiple_of(6) {
        return Err(Error::Graph(format!("trace(A^3) = {trace} is not divisible by 6")));
    }
    Ok(TriangleStats { total: trace as u64 / 6, per_node })
}

/// Same counts from the edge list, by intersecting neighbor bitsets.
pub fn triangle_stats(topo: &Topology) -> TriangleStats {
    let n = topo.n();
    let words = n.div_ceil(64).max(1);
    let mut rows = vec![0u64; n * words];
    for &[i, j] in topo.edges() {
        rows[i * words + j / 64] |= 1 << (j % 64);
        rows[j * words + i / 64] |= 1 << (i % 64);
    }
    let mut per_node = vec![0u64; n];
    let mut twice_total = 0u64;
    for &[i, j] in topo.edges() {
        let common: u64 = (0..words).map(|w| u64::from((rows[i * words + w] & rows[j * words + w]).count_ones())).sum();
        // Each triangle through edge (i, j) is seen from all three of its edges.
        per_node[i] += common;
        per_node[j] += common;
        twice_total += common;
    }
    for t in &mut per_node {
        *t /= 2;
    }
    TriangleStats { total: twice_total / 3, per_node }
}

pub(crate) fn erdos_renyi(n: usize, p: f64, rng: &mut impl Rng) -> Topology {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push([i, j]);
            }
        }
    }
    Topology::new(n, edges).expect("valid by construction")
}

/// Connected components by union-find.
fn components(topo: &Topology) -> usize {
    let mut parent: Vec<usize> = (0..topo.n()).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut count = topo.n();
    for &[i, j] in topo.edges() {
        let (a, b) = (root(&mut parent, i), root(&mut parent, j));
        if a != b {
            parent[a] = b;
            count -= 1;
        }
    }
    count
}

/// Descriptive statistics stored in each split header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub mean_nodes: f64,
    pub mean_edges: f64,
    pub connected_fraction: f64,
    pub mean_components: f64,
    pub label_counts: Vec<(i64, usize)>,
}

impl SplitStats {
    pub fn of(split: &DatasetSplit) -> SplitStats {
        let m = split.len().max(1) as f64;
        let (min_nodes, max_nodes) = split.node_range().unwrap_or((0, 0));
        let comps: Vec<usize> = split.graphs.iter().map(|g| components(g.topology())).collect();
        let mut labels = std::collections::BTreeMap::new();
        for g in &split.graphs {
            *labels.entry(g.label()).or_insert(0) += 1;
        }
        SplitStats {
            min_nodes,
            max_nodes,
            mean_nodes: split.graphs.iter().map(|g| g.n() as f64).sum::<f64>() / m,
            mean_edges: split.graphs.iter().map(|g| g.edges().len() as f64).sum::<f64>() / m,
            connected_fraction: comps.iter().filter(|&&c| c == 1).count() as f64 / m,
            mean_components: comps.iter().sum::<usize>() as f64 / m,
            label_counts: labels.into_iter().collect(),
        }
    }
}

/// Properties shared by every split of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub task: Task,
    pub feature_dim: usize,
    pub label_range: [i64; 2],
    pub seed: u64,
    pub config: serde_json::Value,
    pub palette: Option<Vec<Vec<f64>>>,
    pub degree_cap: Option<usize>,
    pub stratified: bool,
    /// How edges were drawn.
    pub edge_model: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub info: DatasetInfo,
    pub splits: Vec<DatasetSplit>,
}

impl Dataset {
    pub fn split(&self, name: SplitName) -> Option<&DatasetSplit> {
        self.splits.iter().find(|s| s.name == name)
    }

    pub fn require(&self, name: SplitName) -> Result<&DatasetSplit> {
        self.split(name).ok_or_else(|| Error::Config(format!("dataset has no {name} split")))
    }

    pub fn test_splits(&self) -> impl Iterator<Item = &DatasetSplit> {
        self.splits.iter().filter(|s| s.name.is_test())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for name in SplitName::ALL {
            let path = split_path(dir, name);
            match self.split(name) {
                Some(split) => save_split(split, &self.info, &path)?,
                None if path.exists() => fs::remove_file(&path)?,
                None => {}
            }
        }
        Ok(())
    }

    /// Loads every split file present in `dir`.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let mut info: Option<DatasetInfo> = None;
        let mut splits = Vec::new();
        for name in SplitName::ALL {
            let path = split_path(dir, name);
            if !path.exists() {
                continue;
            }
            let (header, split) = load_split_with_header(&path)?;
            if header.split != name {
                return Err(Error::Config(format!("{} holds split {}", path.display(), header.split)));
            }
            match &info {
                None => info = Some(header.info),
                Some(i) if *i == header.info => {}
                Some(_) => {
                    return Err(Error::Config(format!("{}: header disagrees with other splits", path.display())))
                }
            }
            splits.push(split);
        }
        let info = info.ok_or_else(|| Error::Config(format!("no split files in {}", dir.display())))?;
        Ok(Dataset { info, splits })
    }
}

pub fn split_path(dir: &Path, name: SplitName) -> PathBuf {
    dir.join(format!("{}.jsonl", name.as_str()))
}

pub fn gen_colors(cfg: &ColorsConfig) -> Result<Dataset> {
    cfg.validate()?;
    let width = cfg.feature_dim();
    let train_palette = cfg.train_palette();
    let largec_palette = cfg.largec_palette();
    let mut splits = Vec::new();
    for name in Task::Colors.splits() {
        let (count, range, palette) = match name {
            SplitName::Train => (cfg.n_train, cfg.small_nodes, &train_palette),
            SplitName::Val => (cfg.n_val, cfg.small_nodes, &train_palette),
            SplitName::TestOrig => (cfg.n_test, cfg.small_nodes, &train_palette),
            SplitName::TestLarge => (cfg.n_test, cfg.large_nodes, &train_palette),
            SplitName::TestLargec => (cfg.n_test, cfg.large_nodes, &largec_palette),
        };
        let mut rng = substream(cfg.seed, &format!("colors/{name}"));
        let graphs = (0..count)
            .map(|_| colors_graph(&mut rng, range, cfg.max_green, cfg.p_edge, width, palette))
            .collect::<Result<Vec<_>>>()?;
        splits.push(DatasetSplit::new(*name, width, graphs)?);
    }
    let mut palette = vec![onehot(width, GREEN)];
    palette.extend(largec_palette);
    Ok(Dataset {
        info: DatasetInfo {
            task: Task::Colors,
            feature_dim: width,
            label_range: [0, cfg.max_green as i64],
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            palette: Some(palette),
            degree_cap: None,
            stratified: false,
            edge_model: format!("erdos-renyi p={}", cfg.p_edge),
        },
        splits,
    })
}

fn colors_graph(
    rng: &mut impl Rng,
    range: NodeRange,
    max_green: usize,
    p_edge: f64,
    width: usize,
    palette: &[Vec<f64>],
) -> Result<Graph> {
    let n = range.sample(rng);
    let n_green = rng.random_range(0..=max_green.min(n));
    let mut is_green = vec![false; n];
    for i in rand::seq::index::sample(rng, n, n_green) {
        is_green[i] = true;
    }
    let mut features = Vec::with_capacity(n * width);
    for &g in &is_green {
        if g {
            features.extend(onehot(width, GREEN));
        } else {
            features.extend_from_slice(&palette[rng.random_range(0..palette.len())]);
        }
    }
    let topo = erdos_renyi(n, p_edge, rng);
    let gt = is_green.iter().map(|&g| if g { 1.0 / n_green as f64 } else { 0.0 }).collect();
    Graph::new(topo, width, features, n_green as i64, Some(gt))
}

pub fn gen_triangles(cfg: &TrianglesConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut topos: Vec<(SplitName, Vec<(Topology, TriangleStats)>)> = Vec::new();
    for name in Task::Triangles.splits() {
        let (count, range) = match name {
            SplitName::Train => (cfg.n_train, cfg.small_nodes),
            SplitName::Val => (cfg.n_val, cfg.small_nodes),
            SplitName::TestOrig => (cfg.n_test, cfg.small_nodes),
            _ => (cfg.n_test, cfg.large_nodes),
        };
        let mut rng = substream(cfg.seed, &format!("triangles/{name}"));
        topos.push((*name, stratified_triangles(&mut rng, *name, count, range, cfg)?));
    }
    let cap = match cfg.degree_cap {
        Some(c) => c,
        None => topos[0].1.iter().flat_map(|(t, _)| t.degrees()).max().unwrap_or(0),
    };
    let width = cap + 1;
    let mut splits = Vec::new();
    for (name, items) in topos {
        let graphs =
            items.into_iter().map(|(topo, stats)| triangles_graph(topo, &stats, cap)).collect::<Result<Vec<_>>>()?;
        splits.push(DatasetSplit::new(name, width, graphs)?);
    }
    Ok(Dataset {
        info: DatasetInfo {
            task: Task::Triangles,
            feature_dim: width,
            label_range: [cfg.min_label as i64, cfg.max_label as i64],
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            palette: None,
            degree_cap: Some(cap),
            stratified: true,
            edge_model: "erdos-renyi p=(label/C(N,3))^(1/3)*U(0.8,1.25), per attempt".into(),
        },
        splits,
    })
}

fn triangles_graph(topo: Topology, stats: &TriangleStats, cap: usize) -> Result<Graph> {
    let features = degree_onehot::<f64>(&topo, cap).into_data();
    let sum: u64 = stats.per_node.iter().sum();
    let gt = stats.per_node.iter().map(|&t| t as f64 / sum as f64).collect();
    Graph::new(topo, cap + 1, features, stats.total as i64, Some(gt))
}

fn stratified_triangles(
    rng: &mut impl Rng,
    split: SplitName,
    count: usize,
    range: NodeRange,
    cfg: &TrianglesConfig,
) -> Result<Vec<(Topology, TriangleStats)>> {
    let classes = cfg.max_label - cfg.min_label + 1;
    let mut out = Vec::with_capacity(count);
    for c in 0..classes {
        let label = (cfg.min_label + c) as u64;
        let share = count / classes + usize::from(c < count % classes);
        for _ in 0..share {
            out.push(sample_with_triangles(rng, label, range, cfg.attempts_per_graph).ok_or_else(|| {
                Error::Generation(format!(
                    "split {split}, label {label}: no graph found in {} attempts",
                    cfg.attempts_per_graph
                ))
            })?);
        }
    }
    // Interleave classes so file order carries no label information.
    for i in (1..out.len()).rev() {
        out.swap(i, rng.random_range(0..=i));
    }
    Ok(out)
}

fn sample_with_triangles(
    rng: &mut impl Rng,
    label: u64,
    range: NodeRange,
    attempts: usize,
) -> Option<(Topology, TriangleStats)> {
    for _ in 0..attempts {
        let n = range.sample(rng);
        let c3 = choose3(n);
        if c3 < label {
            continue;
        }
        let scale: f64 = rng.random_range(0.8..1.25);
        let p = ((label as f64 / c3 as f64).cbrt() * scale).min(1.0);
        let topo = erdos_renyi(n, p, rng);
        let stats = triangle_stats(&topo);
        if stats.total == label {
            return Some((topo, stats));
        }
    }
    None
}

/// First line of a split file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitHeader {
    pub format_version: u32,
    pub split: SplitName,
    pub num_graphs: usize,
    pub sha256: String,
    pub stats: SplitStats,
    #[serde(flatten)]
    pub info: DatasetInfo,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphRecord {
    n: usize,
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    features: Option<Vec<f64>>,
    label: i64,
    gt_attn: Option<Vec<f64>>,
}

fn graph_line(g: &Graph, with_features: bool) -> Result<String> {
    let rec = GraphRecord {
        n: g.n(),
        edges: g.edges().to_vec(),
        features: with_features.then(|| g.features().to_vec()),
        label: g.label(),
        gt_attn: g.gt_attention().map(<[f64]>::to_vec),
    };
    Ok(serde_json::to_string(&rec)?)
}

/// Writes a header line followed by one graph per line.
///
/// Triangles features are omitted and rebuilt from `degree_cap` on load.
pub fn save_split(split: &DatasetSplit, info: &DatasetInfo, path: &Path) -> Result<()> {
    if split.feature_dim != info.feature_dim {
        return Err(Error::Config(format!(
            "split width {} differs from dataset width {}",
            split.feature_dim, info.feature_dim
        )));
    }
    let with_features = info.task == Task::Colors || info.degree_cap.is_none();
    let mut body = String::new();
    let mut hasher = Sha256::new();
    for g in &split.graphs {
        let mut line = graph_line(g, with_features)?;
        line.push('\n');
        hasher.update(line.as_bytes());
        body.push_str(&line);
    }
    let header = SplitHeader {
        format_version: FORMAT_VERSION,
        split: split.name,
        num_graphs: split.len(),
        sha256: hex(&hasher.finalize()),
        stats: SplitStats::of(split),
        info: info.clone(),
    };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut out = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    out.write_all(body.as_bytes())?;
    out.flush()?;
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn load_split(path: &Path) -> Result<DatasetSplit> {
    Ok(load_split_with_header(path)?.1)
}

pub fn load_split_with_header(path: &Path) -> Result<(SplitHeader, DatasetSplit)> {
    let parse = |line: usize, msg: String| Error::Parse { path: path.to_path_buf(), line, msg };
    let reader = BufReader::new(fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| parse(1, "missing header line".into()))??;
    let header: SplitHeader = serde_json::from_str(&first).map_err(|e| parse(1, e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(parse(1, format!("unsupported format version {}", header.format_version)));
    }
    let info = &header.info;
    let mut hasher = Sha256::new();
    let mut graphs = Vec::with_capacity(header.num_graphs);
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line?;
        hasher.update(line.as_bytes());
        hasher.update(b"\n");
        let rec: GraphRecord = serde_json::from_str(&line).map_err(|e| parse(lineno, e.to_string()))?;
        let g = record_to_graph(rec, info).map_err(|e| parse(lineno, e.to_string()))?;
        graphs.push(g);
    }
    let found = hex(&hasher.finalize());
    if found != header.sha256 {
        return Err(Error::Checksum { path: path.to_path_buf(), expected: header.sha256.clone(), found });
    }
    if graphs.len() != header.num_graphs {
        return Err(parse(1, format!("header promises {} graphs, file has {}", header.num_graphs, graphs.len())));
    }
    let split = DatasetSplit::new(header.split, info.feature_dim, graphs)?;
    Ok((header, split))
}

fn record_to_graph(rec: GraphRecord, info: &DatasetInfo) -> Result<Graph> {
    let topo = Topology::new(rec.n, rec.edges)?;
    let features = match (rec.features, info.degree_cap) {
        (Some(f), _) => f,
        (None, Some(cap)) => degree_onehot::<f64>(&topo, cap).into_data(),
        (None, None) => return Err(Error::Graph("features missing and no degree_cap in header".into())),
    };
    match info.task {
        Task::Triangles => {
            let total = triangle_stats(&topo).total as i64;
            if total != rec.label {
                return Err(Error::Graph(format!("label {} but graph has {total} triangles", rec.label)));
            }
        }
        Task::Colors => {
            let w = info.feature_dim;
            let green = features.chunks(w).filter(|row| row.get(GREEN) == Some(&1.0)).count() as i64;
            if green != rec.label {
                return Err(Error::Graph(format!("label {} but graph has {green} green nodes", rec.label)));
            }
        }
    }
    Graph::new(topo, info.feature_dim, features, rec.label, rec.gt_attn)
}
