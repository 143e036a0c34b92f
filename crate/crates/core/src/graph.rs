//! Graph samples, structural operators and node removal.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autodiff::{check_ascending, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const ATTN_SUM_TOL: f64 = 1e-9;

/// Undirected simple graph structure: `n` nodes and `i < j` edge pairs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    edges: Vec<[usize; 2]>,
}

impl Topology {
    /// Validates and canonicalizes (sorted, `i < j`) an edge list.
    pub fn new(n: usize, edges: Vec<[usize; 2]>) -> Result<Self> {
        let mut edges = edges;
        for e in &mut edges {
            if e[0] >= n || e[1] >= n {
                return Err(Error::Graph(format!("edge {:?} out of range for {n} nodes", e)));
            }
            if e[0] == e[1] {
                return Err(Error::Graph(format!("self-loop at node {}", e[0])));
            }
            if e[0] > e[1] {
                e.swap(0, 1);
            }
        }
        edges.sort_unstable();
        if let Some(w) = edges.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Graph(format!("duplicate edge {:?}", w[0])));
        }
        Ok(Topology { n, edges })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &[i, j] in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Symmetric 0/1 adjacency with a zero diagonal.
    pub fn adjacency<T: Scalar>(&self) -> Tensor<T> {
        let mut a = Tensor::zeros(self.n, self.n);
        for &[i, j] in &self.edges {
            a.set(i, j, T::one());
            a.set(j, i, T::one());
        }
        a
    }

    /// Induced subgraph on `keep` (strictly ascending), relabeled in order.
    pub fn induced(&self, keep: &[usize]) -> Result<Topology> {
        if keep.is_empty() {
            return Err(Error::Graph("cannot drop every node".into()));
        }
        check_ascending("drop_nodes", keep, self.n)?;
        let mut remap = vec![usize::MAX; self.n];
        for (new, &old) in keep.iter().enumerate() {
            remap[old] = new;
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&[i, j]| {
                let (a, b) = (remap[i], remap[j]);
                (a != usize::MAX && b != usize::MAX).then_some([a, b])
            })
            .collect();
        // Order-preserving relabeling keeps i < j and the sort order.
        Ok(Topology { n: keep.len(), edges })
    }
}

/// One labeled sample: structure, node features and optional ground-truth attention.
#[derive(Clone, PartialEq)]
pub struct Graph {
    topo: Topology,
    feature_dim: usize,
    features: Vec<f64>,
    label: i64,
    gt_attention: Option<Vec<f64>>,
}

impl Graph {
    pub fn new(
        topo: Topology,
        feature_dim: usize,
        features: Vec<f64>,
        label: i64,
        gt_attention: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n = topo.n();
        if features.len() != n * feature_dim {
            return Err(Error::Graph(format!("features hold {} values, expected {n}x{feature_dim}", features.len())));
        }
        if let Some(gt) = &gt_attention {
            if gt.len() != n {
                return Err(Error::Graph(format!("gt_attention has {} entries for {n} nodes", gt.len())));
            }
            if let Some(v) = gt.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
                return Err(Error::Graph(format!("gt_attention entry {v} is not a finite nonnegative value")));
            }
            let total: f64 = gt.iter().sum();
            if total != 0.0 && (total - 1.0).abs() > ATTN_SUM_TOL {
                return Err(Error::Graph(format!("gt_attention sums to {total}")));
            }
        }
        Ok(Graph { topo, feature_dim, features, label, gt_attention })
    }

    pub fn n(&self) -> usize {
        self.topo.n
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.topo.edges
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, i: usize) -> &[f64] {
        &self.features[i * self.feature_dim..(i + 1) * self.feature_dim]
    }

    pub fn feature_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_f64(self.n(), self.feature_dim, &self.features).expect("validated at construction")
    }

    pub fn label(&self) -> i64 {
        self.label
    }

    /// Regression target.
    pub fn target(&self) -> f64 {
        self.label as f64
    }

    pub fn gt_attention(&self) -> Option<&[f64]> {
        self.gt_attention.as_deref()
    }

    pub fn adjacency<T: Scalar>(&self) -> Tensor<T> {
        self.topo.adjacency()
    }

    /// Induced subgraph on `keep`; features and ground truth are gathered,
    /// ground truth is not renormalized.
    pub fn drop_nodes(&self, keep: &[usize]) -> Result<Graph> {
        let topo = self.topo.induced(keep)?;
        let mut features = Vec::with_capacity(keep.len() * self.feature_dim);
        for &i in keep {
            features.extend_from_slice(self.feature_row(i));
        }
        let gt_attention = self.gt_attention.as_ref().map(|gt| keep.iter().map(|&i| gt[i]).collect());
        Ok(Graph { topo, feature_dim: self.feature_dim, features, label: self.label, gt_attention })
    }

    pub fn remove_single_node(&self, i: usize) -> Result<Graph> {
        if self.n() < 2 {
            return Err(Error::Graph("cannot remove the only node".into()));
        }
        if i >= self.n() {
            return Err(Error::IndexOutOfRange { op: "remove_single_node", index: i, len: self.n() });
        }
        let keep: Vec<usize> = (0..self.n()).filter(|&k| k != i).collect();
        self.drop_nodes(&keep)
    }
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("n", &self.n())
            .field("edges", &self.topo.edges.len())
            .field("feature_dim", &self.feature_dim)
            .field("label", &self.label)
            .finish()
    }
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂` the degree after adding self-loops.
pub fn gcn_norm<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let n = a.rows();
    let mut out = a.clone();
    for i in 0..n {
        out.set(i, i, out.get(i, i) + T::one());
    }
    let inv_sqrt: Vec<T> = (0..n)
        .map(|i| {
            let d: T = out.row(i).iter().copied().sum();
            T::one() / d.sqrt()
        })
        .collect();
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, out.get(i, j) * inv_sqrt[i] * inv_sqrt[j]);
        }
    }
    out
}

/// Row sums of an adjacency matrix.
pub fn degrees<T: Scalar>(a: &Tensor<T>) -> Vec<T> {
    (0..a.rows()).map(|i| a.row(i).iter().copied().sum()).collect()
}

/// One-hot node degrees with `dmax + 1` bins; larger degrees land in the last bin.
pub fn degree_onehot<T: Scalar>(topo: &Topology, dmax: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(topo.n(), dmax + 1);
    for (i, d) in topo.degrees().into_iter().enumerate() {
        out.set(i, d.min(dmax), T::one());
    }
    out
}

/// `D^{-1} A`; rows of isolated nodes stay zero.
pub fn mean_propagation<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    for (i, d) in degrees(a).into_iter().enumerate() {
        if d > T::zero() {
            for j in 0..a.cols() {
                out.set(i, j, out.get(i, j) / d);
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitName {
    Train,
    Val,
    TestOrig,
    TestLarge,
    TestLargec,
}

impl SplitName {
    pub const ALL: [SplitName; 5] =
        [SplitName::Train, SplitName::Val, SplitName::TestOrig, SplitName::TestLarge, SplitName::TestLargec];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::TestOrig => "test-orig",
            SplitName::TestLarge => "test-large",
            SplitName::TestLargec => "test-largec",
        }
    }

    pub fn is_test(self) -> bool {
        matches!(self, SplitName::TestOrig | SplitName::TestLarge | SplitName::TestLargec)
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|n| n.as_str() == s)
    }
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Graphs sharing one feature width.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub name: SplitName,
    pub feature_dim: usize,
    pub graphs: Vec<Graph>,
}

impl DatasetSplit {
    pub fn new(name: SplitName, feature_dim: usize, graphs: Vec<Graph>) -> Result<Self> {
        if let Some(g) = graphs.iter().find(|g| g.feature_dim() != feature_dim) {
            return Err(Error::Graph(format!(
                "split {name}: graph width {} differs from {feature_dim}",
                g.feature_dim()
            )));
        }
        Ok(DatasetSplit { name, feature_dim, graphs })
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// `(min, max)` node counts, `None` for an empty split.
    pub fn node_range(&self) -> Option<(usize, usize)> {
        let min = self.graphs.iter().map(Graph::n).min()?;
        let max = self.graphs.iter().map(Graph::n).max()?;
        Some((min, max))
    }
}

/// Consecutive index batches over `order`; the last one may be short.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size.max(1))
}
