//! Synthetic anomaly injection.
//!
//! Structural anomalies are groups of `c` randomly chosen nodes wired into
//! cliques. Contextual anomalies copy the attributes of the most distant
//! node in a random candidate pool. The two sets are kept disjoint.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::AttributedGraph;
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionSpec {
    pub clique_size: usize,
    pub candidate_pool: usize,
    /// Fraction of nodes to make anomalous, split evenly between the types.
    pub rate: f64,
    /// Explicit counts; when both are set they override `rate`.
    pub num_cliques: Option<usize>,
    pub num_contextual: Option<usize>,
    pub seed: u64,
}

impl Default for InjectionSpec {
    fn default() -> Self {
        InjectionSpec {
            clique_size: 15,
            candidate_pool: 50,
            rate: 0.05,
            num_cliques: None,
            num_contextual: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Structural,
    Contextual,
}

impl AnomalyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AnomalyKind::Structural => "structural",
            AnomalyKind::Contextual => "contextual",
        }
    }
}

#[derive(Debug, Clone)]
pub struct InjectionReport {
    pub structural: Vec<usize>,
    pub contextual: Vec<usize>,
    pub cliques: Vec<Vec<usize>>,
    pub graph: AttributedGraph,
}

impl InjectionReport {
    /// All injected nodes, sorted.
    pub fn anomalies(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.structural.iter().chain(&self.contextual).copied().collect();
        all.sort_unstable();
        all
    }

    /// `(node, kind)` pairs sorted by node.
    pub fn typed_labels(&self) -> Vec<(usize, AnomalyKind)> {
        let mut out: Vec<(usize, AnomalyKind)> = self
            .structural
            .iter()
            .map(|&i| (i, AnomalyKind::Structural))
            .chain(self.contextual.iter().map(|&i| (i, AnomalyKind::Contextual)))
            .collect();
        out.sort_unstable_by_key(|p| p.0);
        out
    }
}

/// Wires `num_cliques` disjoint random groups of `clique_size` nodes into
/// cliques. Returns the perturbed graph and the groups.
pub fn inject_structural(
    graph: &AttributedGraph,
    num_cliques: usize,
    clique_size: usize,
    rng: &mut Rng,
) -> Result<(AttributedGraph, Vec<Vec<usize>>)> {
    if clique_size < 2 && num_cliques > 0 {
        return Err(Error::Config(format!("clique size must be at least 2, got {clique_size}")));
    }
    let total = num_cliques * clique_size;
    let n = graph.num_nodes();
    if total > n {
        return Err(Error::InsufficientNodes(format!(
            "{num_cliques} cliques of {clique_size} need {total} nodes, graph has {n}"
        )));
    }
    let chosen = index::sample(rng, n, total).into_vec();
    let cliques: Vec<Vec<usize>> = chosen.chunks(clique_size.max(1)).map(<[usize]>::to_vec).collect();
    let mut extra = Vec::new();
    for clique in &cliques {
        for (a, &u) in clique.iter().enumerate() {
            for &v in &clique[a + 1..] {
                if !graph.has_edge(u, v) {
                    extra.push((u, v));
                }
            }
        }
    }
    Ok((graph.with_added_edges(&extra)?, cliques))
}

/// Replaces the attributes of `count` random nodes with those of the
/// farthest node (Euclidean) among `pool` random other nodes.
///
/// Nodes in `exclude` are never chosen as targets. Distance ties go to
/// the lowest node index.
pub fn inject_contextual(
    graph: &AttributedGraph,
    count: usize,
    pool: usize,
    exclude: &[usize],
    rng: &mut Rng,
) -> Result<(AttributedGraph, Vec<usize>)> {
    let n = graph.num_nodes();
    if count == 0 {
        return Ok((graph.clone(), Vec::new()));
    }
    if pool == 0 {
        return Err(Error::Config("candidate pool must be at least 1".into()));
    }
    if count + pool > n {
        return Err(Error::InsufficientNodes(format!(
            "{count} contextual anomalies with a pool of {pool} need {} nodes, graph has {n}",
            count + pool
        )));
    }
    let mut blocked = vec![false; n];
    for &i in exclude {
        if i >= n {
            return Err(Error::IndexOutOfRange { index: i, num_nodes: n });
        }
        blocked[i] = true;
    }
    let mut eligible: Vec<usize> = (0..n).filter(|&i| !blocked[i]).collect();
    if eligible.len() < count {
        return Err(Error::InsufficientNodes(format!(
            "{count} contextual anomalies requested, {} eligible nodes",
            eligible.len()
        )));
    }

    let mut features = graph.features().clone();
    let mut injected = Vec::with_capacity(count);
    for _ in 0..count {
        let target = eligible.swap_remove(rng.gen_range(0..eligible.len()));
        // pool drawn from the other n-1 nodes
        let candidates: Vec<usize> = index::sample(rng, n - 1, pool)
            .into_iter()
            .map(|k| if k >= target { k + 1 } else { k })
            .collect();
        let xi = features.row(target).to_owned();
        let mut best: Option<(f64, usize)> = None;
        for j in candidates {
            let dist: f64 = features
                .row(j)
                .iter()
                .zip(xi.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            let better = match best {
                None => true,
                Some((bd, bj)) => dist > bd || (dist == bd && j < bj),
            };
            if better {
                best = Some((dist, j));
            }
        }
        let (_, source) = best.expect("pool is non-empty");
        let replacement = features.row(source).to_owned();
        features.row_mut(target).assign(&replacement);
        injected.push(target);
    }
    Ok((graph.with_features(features)?, injected))
}

/// Per-type counts for a combined injection: `(num_cliques, structural, contextual)`.
///
/// Each type gets `round(rate * n / 2)` nodes; the structural share is
/// floored to whole cliques and the remainder goes to contextual.
pub fn combined_counts(n: usize, spec: &InjectionSpec) -> Result<(usize, usize, usize)> {
    if spec.clique_size < 2 {
        return Err(Error::Config(format!("clique size must be at least 2, got {}", spec.clique_size)));
    }
    if let (Some(k), Some(ctx)) = (spec.num_cliques, spec.num_contextual) {
        return Ok((k, k * spec.clique_size, ctx));
    }
    let rate = spec.rate;
    if !(rate > 0.0 && rate < 1.0) {
        return Err(Error::Config(format!("injection rate must be in (0, 1), got {rate}")));
    }
    if rate * (n as f64) < 2.0 {
        return Err(Error::Config(format!(
            "rate {rate} on {n} nodes yields fewer than 2 anomalies"
        )));
    }
    let per_type = (rate * n as f64 / 2.0).round() as usize;
    let num_cliques = per_type / spec.clique_size;
    let structural = num_cliques * spec.clique_size;
    let contextual = 2 * per_type - structural;
    Ok((num_cliques, structural, contextual))
}

/// Structural then contextual injection at the spec's rate.
pub fn inject_combined(graph: &AttributedGraph, spec: &InjectionSpec, rng: &mut Rng) -> Result<InjectionReport> {
    let n = graph.num_nodes();
    let (num_cliques, structural_count, contextual_count) = combined_counts(n, spec)?;
    if structural_count + contextual_count > n {
        return Err(Error::InsufficientNodes(format!(
            "{} anomalies requested on {n} nodes",
            structural_count + contextual_count
        )));
    }
    let (with_cliques, cliques) = inject_structural(graph, num_cliques, spec.clique_size, rng)?;
    let structural: Vec<usize> = cliques.iter().flatten().copied().collect();
    let (perturbed, contextual) = inject_contextual(
        &with_cliques,
        contextual_count,
        spec.candidate_pool,
        &structural,
        rng,
    )?;
    debug_assert!(contextual.iter().all(|c| !structural.contains(c)));
    Ok(InjectionReport {
        structural,
        contextual,
        cliques,
        graph: perturbed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::{array, Array2};

    fn empty(n: usize, d: usize) -> AttributedGraph {
        let x = Array2::from_shape_fn((n, d), |(i, j)| ((i * 7 + j * 3) % 11) as f64);
        AttributedGraph::from_edges(n, &[], x).unwrap().0
    }

    #[test]
    fn clique_counts_and_adjacency() {
        let g = empty(100, 2);
        let (g2, cliques) = inject_structural(&g, 3, 15, &mut seeded(1)).unwrap();
        assert_eq!(cliques.iter().map(Vec::len).sum::<usize>(), 45);
        for c in &cliques {
            for &u in c {
                for &v in c {
                    assert!(u == v || g2.has_edge(u, v));
                }
            }
        }
        assert_eq!(g2.num_edges(), 3 * 15 * 14 / 2);
        g2.validate().unwrap();
        assert!(inject_structural(&g, 7, 15, &mut seeded(1)).is_err());
    }

    #[test]
    fn pair_clique_adds_at_most_one_edge() {
        let (g, _) = AttributedGraph::from_edges(3, &[(0, 1)], Array2::zeros((3, 1))).unwrap();
        let (g2, cliques) = inject_structural(&g, 1, 2, &mut seeded(3)).unwrap();
        let [u, v] = cliques[0][..] else { panic!() };
        assert!(g2.has_edge(u, v));
        assert!(g2.num_edges() - g.num_edges() <= 1);
    }

    #[test]
    fn contextual_copies_distant_point() {
        // node 0 = x, node 1 duplicates it, node 2 is far away
        let x = array![[0.0, 0.0], [0.0, 0.0], [9.0, 9.0]];
        let (g, _) = AttributedGraph::from_edges(3, &[], x).unwrap();
        // exclude 1 and 2 so node 0 is the target; the pool is {1, 2}
        let (g2, nodes) = inject_contextual(&g, 1, 2, &[1, 2], &mut seeded(0)).unwrap();
        assert_eq!(nodes, vec![0]);
        assert_eq!(g2.features().row(0), g.features().row(2));
        assert_eq!(g2.edge_list(), g.edge_list());
    }

    #[test]
    fn contextual_identical_features_unchanged() {
        let (g, _) = AttributedGraph::from_edges(20, &[], Array2::from_elem((20, 3), 1.5)).unwrap();
        let (g2, nodes) = inject_contextual(&g, 5, 10, &[], &mut seeded(8)).unwrap();
        assert_eq!(nodes.len(), 5);
        assert_eq!(g2.features(), g.features());
    }

    #[test]
    fn contextual_errors() {
        let g = empty(10, 2);
        assert!(inject_contextual(&g, 5, 6, &[], &mut seeded(1)).is_err());
        assert!(inject_contextual(&g, 5, 0, &[], &mut seeded(1)).is_err());
    }

    #[test]
    fn combined_rounding() {
        let spec = InjectionSpec::default();
        assert_eq!(combined_counts(3000, &spec).unwrap(), (5, 75, 75));
        // 2000 nodes: 50 per type, 3 cliques (45) and 55 contextual
        assert_eq!(combined_counts(2000, &spec).unwrap(), (3, 45, 55));
        assert!(combined_counts(20, &spec).is_err());
        let bad = InjectionSpec { rate: 1.5, ..spec.clone() };
        assert!(combined_counts(3000, &bad).is_err());
    }

    #[test]
    fn combined_labels_are_injected_set() {
        let g = empty(400, 4);
        let spec = InjectionSpec { rate: 0.1, clique_size: 5, ..Default::default() };
        let r = inject_combined(&g, &spec, &mut seeded(2)).unwrap();
        assert_eq!(r.structural.len(), 20);
        assert_eq!(r.contextual.len(), 20);
        let all = r.anomalies();
        let mut dedup = all.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 40);
        r.graph.validate().unwrap();
    }
}
