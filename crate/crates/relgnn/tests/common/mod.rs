//! Shared test fixtures and the independent dense-adjacency oracle.

pub mod oracle;

use rand::Rng;
use relgnn::graph::TypedGraph;
use relgnn::rng::StreamKey;

/// The worked four-node example: nodes A=0, B=1, C=2, D=3;
/// type "1": B->A, B->C, D->A, C->D; type "2": B->D, C->A.
pub fn fig1_graph(feature_dim: usize) -> TypedGraph {
    let features: Vec<f64> = (0..4 * feature_dim)
        .map(|i| ((i as f64) * 0.37).sin())
        .collect();
    TypedGraph::new(
        4,
        vec!["1".into(), "2".into()],
        vec![vec![(1, 0), (1, 2), (3, 0), (2, 3)], vec![(1, 3), (2, 0)]],
        feature_dim,
        features,
    )
    .unwrap()
}

/// Small random multigraph: up to `max_nodes` nodes, `num_types` edge types,
/// duplicate edges and isolated nodes both possible.
pub fn random_graph(stream: &StreamKey, max_nodes: usize, num_types: usize, feature_dim: usize) -> TypedGraph {
    let mut rng = stream.rng();
    let n = rng.gen_range(1..=max_nodes);
    let edge_types: Vec<String> = (0..num_types).map(|l| format!("t{l}")).collect();
    let edges: Vec<Vec<(usize, usize)>> = (0..num_types)
        .map(|_| {
            let count = rng.gen_range(0..=2 * n);
            (0..count)
                .map(|_| (rng.gen_range(0..n), rng.gen_range(0..n)))
                .collect()
        })
        .collect();
    let features: Vec<f64> = (0..n * feature_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    TypedGraph::new(n, edge_types, edges, feature_dim, features).unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch: {} vs {}", a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}
