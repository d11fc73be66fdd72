//! Sparse attributed graphs and the parameter-free half of the SGC encoder.
//!
//! The adjacency is stored in CSR form, symmetric, with no self-loops. The
//! encoder's propagation operator is the self-loop augmented symmetric
//! normalization `S = D^-1/2 (A + I) D^-1/2`, and `S^K X` is computed once
//! per graph since it carries no trainable weights.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};
use crate::exec::Exec;

/// Undirected graph with a dense node feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributedGraph {
    row_offsets: Vec<usize>,
    col_indices: Vec<usize>,
    features: Array2<f64>,
    node_ids: Option<Vec<u64>>,
}

/// Counts of edge-list irregularities repaired while building a graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BuildWarnings {
    pub duplicate_edges: usize,
    pub self_loops: usize,
}

impl BuildWarnings {
    pub fn total(&self) -> usize {
        self.duplicate_edges + self.self_loops
    }
}

impl AttributedGraph {
    /// Builds a graph from an undirected edge list.
    ///
    /// Each pair may be given in either orientation. Repeated pairs and
    /// self-loops are dropped and counted in the returned warnings.
    pub fn from_edges(
        num_nodes: usize,
        edges: &[(usize, usize)],
        features: Array2<f64>,
    ) -> Result<(Self, BuildWarnings)> {
        check_features(num_nodes, &features)?;
        let mut warnings = BuildWarnings::default();
        let mut pairs = Vec::with_capacity(edges.len());
        for &(u, v) in edges {
            for w in [u, v] {
                if w >= num_nodes {
                    return Err(Error::IndexOutOfRange {
                        index: w,
                        num_nodes,
                    });
                }
            }
            if u == v {
                warnings.self_loops += 1;
                continue;
            }
            pairs.push((u.min(v), u.max(v)));
        }
        pairs.sort_unstable();
        let before = pairs.len();
        pairs.dedup();
        warnings.duplicate_edges = before - pairs.len();

        let mut degree = vec![0usize; num_nodes];
        for &(u, v) in &pairs {
            degree[u] += 1;
            degree[v] += 1;
        }
        let mut row_offsets = vec![0usize; num_nodes + 1];
        for i in 0..num_nodes {
            row_offsets[i + 1] = row_offsets[i] + degree[i];
        }
        let mut cursor = row_offsets[..num_nodes].to_vec();
        let mut col_indices = vec![0usize; row_offsets[num_nodes]];
        for &(u, v) in &pairs {
            col_indices[cursor[u]] = v;
            cursor[u] += 1;
            col_indices[cursor[v]] = u;
            cursor[v] += 1;
        }
        for i in 0..num_nodes {
            col_indices[row_offsets[i]..row_offsets[i + 1]].sort_unstable();
        }
        Ok((
            AttributedGraph {
                row_offsets,
                col_indices,
                features,
                node_ids: None,
            },
            warnings,
        ))
    }

    /// Builds a graph from raw CSR arrays, checking every invariant.
    pub fn from_csr(
        row_offsets: Vec<usize>,
        col_indices: Vec<usize>,
        features: Array2<f64>,
    ) -> Result<Self> {
        let g = AttributedGraph {
            row_offsets,
            col_indices,
            features,
            node_ids: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_node_ids(mut self, ids: Vec<u64>) -> Result<Self> {
        if ids.len() != self.num_nodes() {
            return Err(Error::Shape(format!(
                "{} node ids for {} nodes",
                ids.len(),
                self.num_nodes()
            )));
        }
        self.node_ids = Some(ids);
        Ok(self)
    }

    /// Checks the structural invariants. Cost is O(E log d_max).
    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if self.row_offsets.is_empty() || self.row_offsets[0] != 0 {
            return Err(Error::InvalidGraph("row offsets must start at 0".into()));
        }
        if self.row_offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidGraph("row offsets decrease".into()));
        }
        if self.row_offsets[n] != self.col_indices.len() {
            return Err(Error::InvalidGraph(
                "last row offset differs from entry count".into(),
            ));
        }
        check_features(n, &self.features)?;
        for i in 0..n {
            let row = self.neighbors(i);
            for (k, &j) in row.iter().enumerate() {
                if j >= n {
                    return Err(Error::IndexOutOfRange {
                        index: j,
                        num_nodes: n,
                    });
                }
                if j == i {
                    return Err(Error::InvalidGraph(format!("self-loop at node {i}")));
                }
                if k > 0 && row[k - 1] >= j {
                    return Err(Error::InvalidGraph(format!(
                        "row {i} is unsorted or has duplicates"
                    )));
                }
                if !self.has_edge(j, i) {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i},{j}) has no reverse entry"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.row_offsets.len() - 1
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.col_indices.len() / 2
    }

    pub fn degree(&self, node: usize) -> usize {
        self.row_offsets[node + 1] - self.row_offsets[node]
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.col_indices[self.row_offsets[node]..self.row_offsets[node + 1]]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn row_offsets(&self) -> &[usize] {
        &self.row_offsets
    }

    pub fn col_indices(&self) -> &[usize] {
        &self.col_indices
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn node_ids(&self) -> Option<&[u64]> {
        self.node_ids.as_deref()
    }

    /// External id of a node, falling back to its dense index.
    pub fn external_id(&self, node: usize) -> u64 {
        self.node_ids
            .as_ref()
            .map_or(node as u64, |ids| ids[node])
    }

    /// Each undirected edge once, as `(u, v)` with `u < v`, in CSR order.
    pub fn edge_list(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.num_edges());
        for u in 0..self.num_nodes() {
            for &v in self.neighbors(u) {
                if u < v {
                    out.push((u, v));
                }
            }
        }
        out
    }

    /// Returns a copy with the feature matrix replaced.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        check_features(self.num_nodes(), &features)?;
        Ok(AttributedGraph {
            features,
            ..self.clone()
        })
    }

    /// Returns a copy with the extra undirected edges merged in.
    pub fn with_added_edges(&self, extra: &[(usize, usize)]) -> Result<Self> {
        let mut edges = self.edge_list();
        edges.extend_from_slice(extra);
        let (g, _) = AttributedGraph::from_edges(self.num_nodes(), &edges, self.features.clone())?;
        Ok(AttributedGraph {
            node_ids: self.node_ids.clone(),
            ..g
        })
    }

    /// Sub-graph induced by `nodes`, re-indexed densely in the given order.
    /// Node ids of the result are the external ids of the selected nodes.
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut local = vec![usize::MAX; n];
        for (new, &old) in nodes.iter().enumerate() {
            if old >= n {
                return Err(Error::IndexOutOfRange {
                    index: old,
                    num_nodes: n,
                });
            }
            if local[old] != usize::MAX {
                return Err(Error::InvalidGraph(format!("node {old} selected twice")));
            }
            local[old] = new;
        }
        let mut edges = Vec::new();
        for &old in nodes {
            for &nb in self.neighbors(old) {
                let (a, b) = (local[old], local[nb]);
                if b != usize::MAX && a < b {
                    edges.push((a, b));
                }
            }
        }
        let features = self.features.select(ndarray::Axis(0), nodes);
        let (g, _) = AttributedGraph::from_edges(nodes.len(), &edges, features)?;
        g.with_node_ids(nodes.iter().map(|&i| self.external_id(i)).collect())
    }
}

fn check_features(num_nodes: usize, features: &Array2<f64>) -> Result<()> {
    if features.nrows() != num_nodes {
        return Err(Error::Shape(format!(
            "feature matrix has {} rows for {} nodes",
            features.nrows(),
            num_nodes
        )));
    }
    if let Some(pos) = features.iter().position(|v| !v.is_finite()) {
        let d = features.ncols().max(1);
        return Err(Error::InvalidGraph(format!(
            "non-finite feature at node {} column {}",
            pos / d,
            pos % d
        )));
    }
    Ok(())
}

/// Square sparse matrix in CSR form with real weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    pub num_nodes: usize,
    pub row_offsets: Vec<usize>,
    pub col_indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl CsrMatrix {
    pub fn identity(n: usize) -> Self {
        CsrMatrix {
            num_nodes: n,
            row_offsets: (0..=n).collect(),
            col_indices: (0..n).collect(),
            values: vec![1.0; n],
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        let lo = self.row_offsets[i];
        let hi = self.row_offsets[i + 1];
        self.col_indices[lo..hi]
            .binary_search(&j)
            .ok()
            .map(|k| self.values[lo + k])
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.num_nodes, self.num_nodes));
        for i in 0..self.num_nodes {
            for k in self.row_offsets[i]..self.row_offsets[i + 1] {
                out[[i, self.col_indices[k]]] = self.values[k];
            }
        }
        out
    }
}

/// The SGC propagation operator `D~^-1/2 (A + I) D~^-1/2`.
pub type NormalizedAdjacency = CsrMatrix;

/// Builds the self-loop augmented, symmetrically normalized adjacency.
///
/// Isolated nodes keep a single diagonal entry of weight 1.
pub fn normalize_adjacency(graph: &AttributedGraph) -> NormalizedAdjacency {
    let n = graph.num_nodes();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::with_capacity(graph.col_indices().len() + n);
    let mut values = Vec::with_capacity(graph.col_indices().len() + n);
    row_offsets.push(0);
    for i in 0..n {
        let mut diag_done = false;
        for &j in graph.neighbors(i) {
            if !diag_done && j > i {
                col_indices.push(i);
                values.push(1.0 / (graph.degree(i) + 1) as f64);
                diag_done = true;
            }
            col_indices.push(j);
            let scale = ((graph.degree(i) + 1) * (graph.degree(j) + 1)) as f64;
            values.push(1.0 / scale.sqrt());
        }
        if !diag_done {
            col_indices.push(i);
            values.push(1.0 / (graph.degree(i) + 1) as f64);
        }
        row_offsets.push(col_indices.len());
    }
    CsrMatrix {
        num_nodes: n,
        row_offsets,
        col_indices,
        values,
    }
}

/// Sparse-dense product `S * M` using the default execution mode.
pub fn spmm(s: &CsrMatrix, m: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    spmm_with(s, m, Exec::default())
}

/// Sparse-dense product with an explicit execution mode. Rows are computed
/// independently with a fixed accumulation order, so the result does not
/// depend on the mode or thread count.
pub fn spmm_with(s: &CsrMatrix, m: ArrayView2<'_, f64>, exec: Exec) -> Result<Array2<f64>> {
    if m.nrows() != s.num_nodes {
        return Err(Error::Shape(format!(
            "sparse operator is {n}x{n}, dense operand has {} rows",
            m.nrows(),
            n = s.num_nodes
        )));
    }
    let cols = m.ncols();
    let mut out = vec![0.0; s.num_nodes * cols];
    exec.for_each_chunk(&mut out, cols, |i, row| {
        for k in s.row_offsets[i]..s.row_offsets[i + 1] {
            let w = s.values[k];
            let src = m.row(s.col_indices[k]);
            for (o, &x) in row.iter_mut().zip(src.iter()) {
                *o += w * x;
            }
        }
    });
    Ok(Array2::from_shape_vec((s.num_nodes, cols), out).expect("shape computed above"))
}

/// Node features after `degree` propagation steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagatedFeatures {
    matrix: Array2<f64>,
    degree: usize,
}

impl PropagatedFeatures {
    /// Raw features with no propagation (the graph-free encoder input).
    pub fn raw(features: &Array2<f64>) -> Self {
        PropagatedFeatures {
            matrix: features.clone(),
            degree: 0,
        }
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_nodes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Applies `s` to `x` `k` times.
pub fn propagate(s: &CsrMatrix, x: &Array2<f64>, k: usize) -> Result<PropagatedFeatures> {
    propagate_with(s, x, k, Exec::default())
}

pub fn propagate_with(
    s: &CsrMatrix,
    x: &Array2<f64>,
    k: usize,
    exec: Exec,
) -> Result<PropagatedFeatures> {
    if x.nrows() != s.num_nodes {
        return Err(Error::Shape(format!(
            "operator has {} nodes, features have {} rows",
            s.num_nodes,
            x.nrows()
        )));
    }
    let mut cur = x.clone();
    for _ in 0..k {
        cur = spmm_with(s, cur.view(), exec)?;
    }
    Ok(PropagatedFeatures {
        matrix: cur,
        degree: k,
    })
}

/// Normalizes and propagates a graph's own features.
pub fn encode_graph(graph: &AttributedGraph, k: usize) -> Result<PropagatedFeatures> {
    let s = normalize_adjacency(graph);
    propagate(&s, graph.features(), k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn graph(n: usize, edges: &[(usize, usize)], d: usize) -> AttributedGraph {
        AttributedGraph::from_edges(n, edges, Array2::zeros((n, d)))
            .unwrap()
            .0
    }

    #[test]
    fn single_node_normalizes_to_one() {
        let s = normalize_adjacency(&graph(1, &[], 1));
        assert_eq!(s.to_dense(), array![[1.0]]);
    }

    #[test]
    fn one_edge_gives_halves() {
        let s = normalize_adjacency(&graph(2, &[(0, 1)], 1));
        assert_eq!(s.to_dense(), array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn star_weights() {
        let s = normalize_adjacency(&graph(3, &[(0, 1), (0, 2)], 1));
        let inv6 = 1.0 / 6f64.sqrt();
        assert_abs_diff_eq!(s.get(0, 0).unwrap(), 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 1).unwrap(), inv6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(0, 2).unwrap(), inv6, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(1, 1).unwrap(), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(s.get(2, 2).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(s.get(1, 2), None);
    }

    #[test]
    fn propagate_zero_steps_is_copy() {
        let g = graph(2, &[(0, 1)], 1);
        let x = array![[3.0, 1.0], [-2.0, 0.5]];
        let p = propagate(&normalize_adjacency(&g), &x, 0).unwrap();
        assert_eq!(p.matrix(), &x);
        assert_eq!(p.degree(), 0);
    }

    #[test]
    fn propagate_isolated_node_is_fixed_point() {
        let s = normalize_adjacency(&graph(1, &[], 2));
        let x = array![[2.0, -1.0]];
        assert_eq!(propagate(&s, &x, 5).unwrap().matrix(), &x);
    }

    #[test]
    fn propagate_one_edge_one_step() {
        let s = normalize_adjacency(&graph(2, &[(0, 1)], 1));
        let p = propagate(&s, &array![[1.0], [0.0]], 1).unwrap();
        assert_eq!(p.matrix(), &array![[0.5], [0.5]]);
    }

    #[test]
    fn spmm_shape_error() {
        let s = CsrMatrix::identity(3);
        assert!(matches!(
            spmm(&s, Array2::<f64>::zeros((2, 2)).view()),
            Err(Error::Shape(_))
        ));
        assert!(propagate(&s, &Array2::zeros((4, 1)), 1).is_err());
    }

    #[test]
    fn spmm_examples() {
        let m = array![[1.5, -2.0, 7.0]];
        assert_eq!(spmm(&CsrMatrix::identity(1), m.view()).unwrap(), m);
        let s = normalize_adjacency(&graph(2, &[(0, 1)], 1));
        let out = spmm(&s, array![[1.0, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(out, array![[0.5, 0.5], [0.5, 0.5]]);
    }

    #[test]
    fn from_edges_repairs_and_counts() {
        let (g, w) =
            AttributedGraph::from_edges(3, &[(0, 1), (1, 0), (2, 2), (1, 2)], Array2::zeros((3, 1)))
                .unwrap();
        assert_eq!(w.duplicate_edges, 1);
        assert_eq!(w.self_loops, 1);
        assert_eq!(g.num_edges(), 2);
        g.validate().unwrap();
    }

    #[test]
    fn from_edges_rejects_bad_input() {
        assert!(AttributedGraph::from_edges(2, &[(0, 2)], Array2::zeros((2, 1))).is_err());
        assert!(AttributedGraph::from_edges(2, &[], Array2::zeros((3, 1))).is_err());
        let mut x = Array2::zeros((2, 1));
        x[[1, 0]] = f64::NAN;
        assert!(AttributedGraph::from_edges(2, &[], x).is_err());
    }

    #[test]
    fn from_csr_checks_symmetry() {
        let err = AttributedGraph::from_csr(vec![0, 1, 1], vec![1], Array2::zeros((2, 1)));
        assert!(err.is_err());
        let ok = AttributedGraph::from_csr(vec![0, 1, 2], vec![1, 0], Array2::zeros((2, 1)));
        assert!(ok.is_ok());
    }

    #[test]
    fn induced_subgraph_keeps_internal_edges() {
        let g = graph(4, &[(0, 1), (1, 2), (2, 3)], 1);
        let sub = g.induced_subgraph(&[2, 1, 3]).unwrap();
        assert_eq!(sub.num_nodes(), 3);
        assert_eq!(sub.edge_list(), vec![(0, 1), (0, 2)]);
        assert_eq!(sub.node_ids().unwrap(), &[2, 1, 3]);
    }
}
