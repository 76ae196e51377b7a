//! Typed directed multigraphs, self-loop augmentation, per-type in-degree
//! counts, and mini-batching by disjoint union.

mod dataset;

pub use dataset::{load_dataset, save_dataset, Dataset, TaskKind};

use crate::error::{Error, Result};

/// Reserved edge type connecting every node to itself.
pub const SELF_LOOP: &str = "SELF";

/// A directed multigraph with typed edges. Edges flow source -> target; no
/// implicit reverse edges. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct TypedGraph {
    pub num_nodes: usize,
    /// Edge type vocabulary, in declaration order.
    pub edge_types: Vec<String>,
    /// Per-type edge lists, aligned with `edge_types`. Duplicate edges are
    /// legitimate and count as distinct messages.
    pub edges: Vec<Vec<(usize, usize)>>,
    pub feature_dim: usize,
    /// Row-major `[num_nodes x feature_dim]`.
    pub node_features: Vec<f64>,
    /// Row-major `[num_nodes x label_dim]`, when the task is node-level.
    pub node_labels: Option<(usize, Vec<f64>)>,
    /// One scalar per graph, when the task is graph-level regression.
    pub graph_target: Option<f64>,
}

impl TypedGraph {
    pub fn new(
        num_nodes: usize,
        edge_types: Vec<String>,
        edges: Vec<Vec<(usize, usize)>>,
        feature_dim: usize,
        node_features: Vec<f64>,
    ) -> Result<Self> {
        let g = TypedGraph {
            num_nodes,
            edge_types,
            edges,
            feature_dim,
            node_features,
            node_labels: None,
            graph_target: None,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.edge_types.len() != self.edges.len() {
            return Err(Error::Graph(format!(
                "{} edge types but {} edge lists",
                self.edge_types.len(),
                self.edges.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for name in &self.edge_types {
            if !seen.insert(name) {
                return Err(Error::Graph(format!("duplicate edge type '{name}'")));
            }
        }
        for (name, list) in self.edge_types.iter().zip(&self.edges) {
            for &(src, tgt) in list {
                if src >= self.num_nodes || tgt >= self.num_nodes {
                    return Err(Error::Graph(format!(
                        "edge [{src}, {tgt}] of type '{name}' out of range for {} nodes",
                        self.num_nodes
                    )));
                }
            }
        }
        if self.node_features.len() != self.num_nodes * self.feature_dim {
            return Err(Error::Graph(format!(
                "feature matrix has {} values, expected {} x {}",
                self.node_features.len(),
                self.num_nodes,
                self.feature_dim
            )));
        }
        if let Some((dim, labels)) = &self.node_labels {
            if labels.len() != self.num_nodes * dim {
                return Err(Error::Graph(format!(
                    "label matrix has {} values, expected {} x {}",
                    labels.len(),
                    self.num_nodes,
                    dim
                )));
            }
        }
        Ok(())
    }

    pub fn type_index(&self, name: &str) -> Option<usize> {
        self.edge_types.iter().position(|t| t == name)
    }

    pub fn has_self_loops(&self) -> bool {
        self.type_index(SELF_LOOP).is_some()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }

    /// Apply a node permutation: node `v` becomes `perm[v]`. Features, labels
    /// and edge endpoints move together.
    pub fn permute(&self, perm: &[usize]) -> Result<TypedGraph> {
        if perm.len() != self.num_nodes {
            return Err(Error::Graph(format!(
                "permutation of length {} for {} nodes",
                perm.len(),
                self.num_nodes
            )));
        }
        let mut features = vec![0.0; self.node_features.len()];
        for v in 0..self.num_nodes {
            let dst = perm[v];
            features[dst * self.feature_dim..(dst + 1) * self.feature_dim]
                .copy_from_slice(&self.node_features[v * self.feature_dim..(v + 1) * self.feature_dim]);
        }
        let edges = self
            .edges
            .iter()
            .map(|list| list.iter().map(|&(s, t)| (perm[s], perm[t])).collect())
            .collect();
        let node_labels = self.node_labels.as_ref().map(|(dim, labels)| {
            let mut out = vec![0.0; labels.len()];
            for v in 0..self.num_nodes {
                let dst = perm[v];
                out[dst * dim..(dst + 1) * dim].copy_from_slice(&labels[v * dim..(v + 1) * dim]);
            }
            (*dim, out)
        });
        let g = TypedGraph {
            num_nodes: self.num_nodes,
            edge_types: self.edge_types.clone(),
            edges,
            feature_dim: self.feature_dim,
            node_features: features,
            node_labels,
            graph_target: self.graph_target,
        };
        g.validate()?;
        Ok(g)
    }
}

/// Add the reserved `SELF` type with exactly one `(v, v)` edge per node.
/// Augmenting twice is a caller error.
pub fn augment_self_loops(g: &TypedGraph) -> Result<TypedGraph> {
    if g.has_self_loops() {
        return Err(Error::Graph(
            "graph already has SELF loops; augmenting twice would double self-state".into(),
        ));
    }
    let mut out = g.clone();
    out.edge_types.push(SELF_LOOP.to_string());
    out.edges.push((0..g.num_nodes).map(|v| (v, v)).collect());
    Ok(out)
}

/// Exact per-target, per-type incoming edge counts: `c[v][l]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NormCounts {
    num_nodes: usize,
    num_types: usize,
    /// Row-major `[num_nodes x num_types]`.
    counts: Vec<u32>,
}

impl NormCounts {
    pub fn get(&self, node: usize, type_idx: usize) -> u32 {
        self.counts[node * self.num_types + type_idx]
    }

    /// Counts supplied directly; used to express normalisation variants such
    /// as total-degree or no normalisation.
    pub fn from_raw(num_nodes: usize, num_types: usize, counts: Vec<u32>) -> Result<Self> {
        if counts.len() != num_nodes * num_types {
            return Err(Error::Graph(format!(
                "count matrix has {} entries, expected {} x {}",
                counts.len(),
                num_nodes,
                num_types
            )));
        }
        Ok(NormCounts {
            num_nodes,
            num_types,
            counts,
        })
    }

    pub fn all_ones(num_nodes: usize, num_types: usize) -> Self {
        NormCounts {
            num_nodes,
            num_types,
            counts: vec![1; num_nodes * num_types],
        }
    }

    /// Replace every type's count with the node's total in-degree across all
    /// types. This is what uniform attention reduces to.
    pub fn total_degree(g: &TypedGraph) -> Self {
        let base = norm_counts(g);
        let mut counts = vec![0u32; g.num_nodes * g.edge_types.len()];
        for v in 0..g.num_nodes {
            let total: u32 = (0..g.edge_types.len()).map(|l| base.get(v, l)).sum();
            for l in 0..g.edge_types.len() {
                counts[v * g.edge_types.len() + l] = total;
            }
        }
        NormCounts {
            num_nodes: g.num_nodes,
            num_types: g.edge_types.len(),
            counts,
        }
    }
}

/// Count incoming edges per target node and type. Zero counts are fine; the
/// per-edge division in the layers only ever sees counts >= 1 because a
/// counted edge exists.
pub fn norm_counts(g: &TypedGraph) -> NormCounts {
    let num_types = g.edge_types.len();
    let mut counts = vec![0u32; g.num_nodes * num_types];
    for (l, list) in g.edges.iter().enumerate() {
        for &(_, tgt) in list {
            counts[tgt * num_types + l] += 1;
        }
    }
    NormCounts {
        num_nodes: g.num_nodes,
        num_types,
        counts,
    }
}

/// Disjoint union of graphs with contiguous node ranges.
#[derive(Debug, Clone)]
pub struct BatchedGraph {
    pub union: TypedGraph,
    /// Originating graph index per union node.
    pub graph_of_node: Vec<usize>,
    pub num_graphs: usize,
    /// Node range `[start, end)` of each member graph.
    pub node_ranges: Vec<(usize, usize)>,
    /// Graph-level targets, when present on all members.
    pub graph_targets: Option<Vec<f64>>,
}

/// Concatenate graphs into one, offsetting node indices by cumulative counts.
pub fn batch_disjoint_union(graphs: &[TypedGraph]) -> Result<BatchedGraph> {
    if graphs.is_empty() {
        return Err(Error::Graph("cannot batch zero graphs".into()));
    }
    let first = &graphs[0];
    for g in graphs {
        if g.edge_types != first.edge_types {
            return Err(Error::Graph(format!(
                "edge type vocabulary mismatch: {:?} vs {:?}",
                g.edge_types, first.edge_types
            )));
        }
        if g.feature_dim != first.feature_dim {
            return Err(Error::Graph(format!(
                "feature dim mismatch: {} vs {}",
                g.feature_dim, first.feature_dim
            )));
        }
    }
    let label_dim = first.node_labels.as_ref().map(|(d, _)| *d);
    let total_nodes: usize = graphs.iter().map(|g| g.num_nodes).sum();

    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); first.edge_types.len()];
    let mut node_features = Vec::with_capacity(total_nodes * first.feature_dim);
    let mut node_labels = label_dim.map(|d| (d, Vec::with_capacity(total_nodes * d)));
    let mut graph_of_node = Vec::with_capacity(total_nodes);
    let mut node_ranges = Vec::with_capacity(graphs.len());
    let mut graph_targets = Some(Vec::with_capacity(graphs.len()));

    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        for (l, list) in g.edges.iter().enumerate() {
            edges[l].extend(list.iter().map(|&(s, t)| (s + offset, t + offset)));
        }
        node_features.extend_from_slice(&g.node_features);
        match (&mut node_labels, &g.node_labels) {
            (Some((d, acc)), Some((gd, vals))) if d == gd => acc.extend_from_slice(vals),
            (None, None) => {}
            _ => return Err(Error::Graph("node label presence/dim mismatch across batch".into())),
        }
        match (&mut graph_targets, g.graph_target) {
            (Some(acc), Some(t)) => acc.push(t),
            _ => graph_targets = None,
        }
        graph_of_node.extend(std::iter::repeat(gi).take(g.num_nodes));
        node_ranges.push((offset, offset + g.num_nodes));
        offset += g.num_nodes;
    }

    let union = TypedGraph {
        num_nodes: total_nodes,
        edge_types: first.edge_types.clone(),
        edges,
        feature_dim: first.feature_dim,
        node_features,
        node_labels,
        graph_target: None,
    };
    union.validate()?;
    Ok(BatchedGraph {
        union,
        graph_of_node,
        num_graphs: graphs.len(),
        node_ranges,
        graph_targets,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_node_graph() -> TypedGraph {
        TypedGraph::new(
            2,
            vec!["1".into()],
            vec![vec![(0, 1)]],
            1,
            vec![1.0, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn augment_adds_one_self_loop_per_node() {
        let g = TypedGraph::new(1, vec![], vec![], 1, vec![0.5]).unwrap();
        let a = augment_self_loops(&g).unwrap();
        assert_eq!(a.edge_types, vec![SELF_LOOP.to_string()]);
        assert_eq!(a.edges, vec![vec![(0, 0)]]);
    }

    #[test]
    fn augment_twice_errors() {
        let g = two_node_graph();
        let once = augment_self_loops(&g).unwrap();
        assert!(augment_self_loops(&once).is_err());
    }

    #[test]
    fn fig1_graph_counts() {
        // Nodes A=0, B=1, C=2, D=3; type 1: B->A, B->C, D->A, C->D; type 2: B->D, C->A.
        let g = TypedGraph::new(
            4,
            vec!["1".into(), "2".into()],
            vec![
                vec![(1, 0), (1, 2), (3, 0), (2, 3)],
                vec![(1, 3), (2, 0)],
            ],
            1,
            vec![0.0; 4],
        )
        .unwrap();
        let a = augment_self_loops(&g).unwrap();
        assert_eq!(a.edges[2].len(), 4);
        assert_eq!(a.edges[0].len(), 4); // originals untouched
        let c = norm_counts(&a);
        let t1 = a.type_index("1").unwrap();
        let t2 = a.type_index("2").unwrap();
        let ts = a.type_index(SELF_LOOP).unwrap();
        assert_eq!(c.get(0, t1), 2); // from B and D
        assert_eq!(c.get(0, t2), 1); // from C
        assert_eq!(c.get(0, ts), 1);
    }

    #[test]
    fn isolated_node_has_zero_counts() {
        let g = TypedGraph::new(1, vec!["1".into()], vec![vec![]], 1, vec![0.0]).unwrap();
        let c = norm_counts(&g);
        assert_eq!(c.get(0, 0), 0);
    }

    #[test]
    fn duplicate_edges_count_twice() {
        let g = TypedGraph::new(
            2,
            vec!["1".into()],
            vec![vec![(0, 1), (0, 1)]],
            1,
            vec![0.0, 0.0],
        )
        .unwrap();
        assert_eq!(norm_counts(&g).get(1, 0), 2);
    }

    #[test]
    fn union_of_singleton_is_identity_with_zero_graph_ids() {
        let g = two_node_graph();
        let b = batch_disjoint_union(&[g.clone()]).unwrap();
        assert_eq!(b.union, g);
        assert_eq!(b.graph_of_node, vec![0, 0]);
    }

    #[test]
    fn union_offsets_second_graph() {
        let g = two_node_graph();
        let b = batch_disjoint_union(&[g.clone(), g]).unwrap();
        assert_eq!(b.union.num_nodes, 4);
        assert_eq!(b.union.edges[0], vec![(0, 1), (2, 3)]);
        assert_eq!(b.graph_of_node, vec![0, 0, 1, 1]);
        assert_eq!(b.node_ranges, vec![(0, 2), (2, 4)]);
    }

    #[test]
    fn union_rejects_vocabulary_mismatch() {
        let a = two_node_graph();
        let b = TypedGraph::new(2, vec!["other".into()], vec![vec![]], 1, vec![0.0; 2]).unwrap();
        assert!(batch_disjoint_union(&[a, b]).is_err());
    }

    #[test]
    fn out_of_range_edge_is_rejected_naming_the_edge() {
        let err = TypedGraph::new(3, vec!["1".into()], vec![vec![(5, 0)]], 1, vec![0.0; 3])
            .unwrap_err();
        assert!(err.to_string().contains("[5, 0]"), "got: {err}");
    }

    #[test]
    fn self_loop_then_counts_is_one_everywhere() {
        let g = augment_self_loops(&two_node_graph()).unwrap();
        let c = norm_counts(&g);
        let ts = g.type_index(SELF_LOOP).unwrap();
        for v in 0..g.num_nodes {
            assert_eq!(c.get(v, ts), 1);
        }
    }
}
