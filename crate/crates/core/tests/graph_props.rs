use metagdn::graph::{normalize_adjacency, propagate, propagate_with, spmm, spmm_with, CsrMatrix};
use metagdn::{AttributedGraph, Exec};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng as _;

fn graph_strategy(max_n: usize, d: usize) -> impl Strategy<Value = AttributedGraph> {
    (1..=max_n).prop_flat_map(move |n| {
        let edges = prop::collection::vec((0..n, 0..n), 0..3 * n);
        let feats = prop::collection::vec(-5.0f64..5.0, n * d);
        (Just(n), edges, feats).prop_map(move |(n, edges, feats)| {
            let x = Array2::from_shape_vec((n, d), feats).unwrap();
            AttributedGraph::from_edges(n, &edges, x).unwrap().0
        })
    })
}

/// `D^-1/2 (A + I) D^-1/2` built densely from the edge list.
fn dense_operator(g: &AttributedGraph) -> Array2<f64> {
    let n = g.num_nodes();
    let mut a = Array2::<f64>::eye(n);
    for (u, v) in g.edge_list() {
        a[[u, v]] = 1.0;
        a[[v, u]] = 1.0;
    }
    let deg: Vec<f64> = (0..n).map(|i| a.row(i).sum()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| a[[i, j]] / (deg[i] * deg[j]).sqrt())
}

fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol)
}

proptest! {
    #[test]
    fn operator_matches_dense_and_is_symmetric(g in graph_strategy(50, 1)) {
        let s = normalize_adjacency(&g).to_dense();
        prop_assert!(close(&s, &dense_operator(&g), 1e-12));
        prop_assert!(close(&s, &s.t().to_owned(), 0.0));
        prop_assert!(s.iter().all(|&v| (0.0..=1.0).contains(&v)));
        for i in 0..g.num_nodes() {
            prop_assert!(s[[i, i]] > 0.0);
        }
    }

    #[test]
    fn spmm_matches_dense_product(g in graph_strategy(50, 3)) {
        let s = normalize_adjacency(&g);
        let expect = s.to_dense().dot(g.features());
        let got = spmm(&s, g.features().view()).unwrap();
        prop_assert!(close(&got, &expect, 1e-12));
    }

    #[test]
    fn propagation_composes(g in graph_strategy(40, 2), j in 0usize..4, k in 0usize..4) {
        let s = normalize_adjacency(&g);
        let direct = propagate(&s, g.features(), j + k).unwrap();
        let first = propagate(&s, g.features(), j).unwrap();
        let chained = propagate(&s, first.matrix(), k).unwrap();
        prop_assert!(close(direct.matrix(), chained.matrix(), 1e-10));
        prop_assert_eq!(direct.degree(), j + k);
    }

    #[test]
    fn propagation_does_not_grow_the_largest_entry(g in graph_strategy(40, 2)) {
        // S^k = D^-1/2 P^k D^1/2 with P row-stochastic, so entries of S^k x
        // never exceed max(x) * sqrt(max degree / min degree).
        let s = normalize_adjacency(&g);
        let x = g.features().mapv(f64::abs);
        let deg: Vec<f64> = (0..g.num_nodes()).map(|i| g.degree(i) as f64 + 1.0).collect();
        let spread = deg.iter().cloned().fold(1.0, f64::max).sqrt();
        let bound = x.iter().cloned().fold(0.0, f64::max) * spread;
        let out = propagate(&s, &x, 6).unwrap();
        prop_assert!(out.matrix().iter().all(|&v| v >= 0.0 && v <= bound + 1e-9));
    }

    #[test]
    fn execution_modes_agree_bitwise(g in graph_strategy(50, 4)) {
        let s = normalize_adjacency(&g);
        let a = propagate_with(&s, g.features(), 3, Exec::Sequential).unwrap();
        let b = propagate_with(&s, g.features(), 3, Exec::Parallel).unwrap();
        prop_assert_eq!(a, b);
    }
}

#[test]
fn random_ten_by_ten_against_dense() {
    let mut rng = metagdn::rng::seeded(10);
    let mut edges = Vec::new();
    for u in 0..10 {
        for v in u + 1..10 {
            if rng.gen_bool(0.3) {
                edges.push((u, v));
            }
        }
    }
    let x = Array2::from_shape_fn((10, 10), |_| rng.gen_range(-1.0..1.0));
    let (g, _) = AttributedGraph::from_edges(10, &edges, x.clone()).unwrap();
    let s = normalize_adjacency(&g);
    let got = spmm_with(&s, x.view(), Exec::Sequential).unwrap();
    assert!(close(&got, &dense_operator(&g).dot(&x), 1e-12));
}

#[test]
fn identity_operator_is_a_no_op() {
    let m = Array2::from_shape_fn((1, 3), |(_, j)| j as f64 - 1.5);
    assert_eq!(spmm(&CsrMatrix::identity(1), m.view()).unwrap(), m);
}
