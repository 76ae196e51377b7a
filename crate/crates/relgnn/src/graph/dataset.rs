//! JSON dataset container.
//!
//! ```json
//! {
//!   "task": "node_classification",
//!   "edge_types": ["1", "2"],
//!   "graphs": [
//!     {
//!       "num_nodes": 2,
//!       "features": [[1.0, 0.0], [0.0, 1.0]],
//!       "edges": {"1": [[0, 1]]},
//!       "node_labels": [[1.0], [0.0]]
//!     }
//!   ]
//! }
//! ```
//!
//! Validation is strict: unknown keys are rejected, indices are range-checked
//! with the offending edge named, and label presence must match the task.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};
use std::path::Path;

use super::TypedGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Multi-label binary classification per node (PPI-style).
    NodeClassification,
    /// One regression value per graph (QM9-style).
    GraphRegression,
    /// One regression value per node (neighbour-count toy).
    NodeRegression,
    /// Unlabelled probe graphs for expressiveness checks.
    WlPairProbe,
}

impl TaskKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            TaskKind::NodeClassification => "node_classification",
            TaskKind::GraphRegression => "graph_regression",
            TaskKind::NodeRegression => "node_regression",
            TaskKind::WlPairProbe => "wl_pair_probe",
        }
    }
}

/// A loaded dataset: graphs plus task metadata.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub task: TaskKind,
    pub edge_types: Vec<String>,
    pub graphs: Vec<TypedGraph>,
    pub label_dim: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDataset {
    task: TaskKind,
    edge_types: Vec<String>,
    graphs: Vec<FileGraph>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileGraph {
    num_nodes: usize,
    features: Vec<Vec<f64>>,
    edges: IndexMap<String, Vec<[usize; 2]>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    node_labels: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    targets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Materialise a fresh `INV_<type>` edge type with reversed endpoints for
    /// every type in the file.
    pub add_inverse_edges: bool,
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load_dataset_opts(path, LoadOptions::default())
}

pub fn load_dataset_opts(path: &Path, opts: LoadOptions) -> Result<Dataset> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::Schema(format!("cannot open {}: {e}", path.display())))?;
    let parsed: FileDataset = serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
    dataset_from_file(parsed, opts)
}

fn dataset_from_file(parsed: FileDataset, opts: LoadOptions) -> Result<Dataset> {
    let mut edge_types = parsed.edge_types.clone();
    if opts.add_inverse_edges {
        for t in &parsed.edge_types {
            edge_types.push(format!("INV_{t}"));
        }
    }

    let mut graphs = Vec::with_capacity(parsed.graphs.len());
    let mut label_dim: Option<usize> = None;
    for (gi, fg) in parsed.graphs.into_iter().enumerate() {
        let at = |msg: String| Error::Schema(format!("graph {gi}: {msg}"));

        if fg.features.len() != fg.num_nodes {
            return Err(at(format!(
                "{} feature rows for {} nodes",
                fg.features.len(),
                fg.num_nodes
            )));
        }
        let feature_dim = fg.features.first().map_or(0, |r| r.len());
        let mut features = Vec::with_capacity(fg.num_nodes * feature_dim);
        for row in &fg.features {
            if row.len() != feature_dim {
                return Err(at("ragged feature rows".into()));
            }
            features.extend_from_slice(row);
        }

        let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); edge_types.len()];
        for (name, list) in &fg.edges {
            let idx = parsed
                .edge_types
                .iter()
                .position(|t| t == name)
                .ok_or_else(|| at(format!("edge type '{name}' not in edge_types")))?;
            edges[idx] = list.iter().map(|&[s, t]| (s, t)).collect();
            if opts.add_inverse_edges {
                edges[parsed.edge_types.len() + idx] =
                    list.iter().map(|&[s, t]| (t, s)).collect();
            }
        }

        let mut graph =
            TypedGraph::new(fg.num_nodes, edge_types.clone(), edges, feature_dim, features)
                .map_err(|e| at(e.to_string()))?;

        match parsed.task {
            TaskKind::NodeClassification | TaskKind::NodeRegression => {
                let labels = fg
                    .node_labels
                    .ok_or_else(|| at("node task requires node_labels".into()))?;
                if labels.len() != fg.num_nodes {
                    return Err(at(format!(
                        "{} label rows for {} nodes",
                        labels.len(),
                        fg.num_nodes
                    )));
                }
                let dim = labels.first().map_or(0, |r| r.len());
                if dim == 0 {
                    return Err(at("empty label rows".into()));
                }
                match label_dim {
                    None => label_dim = Some(dim),
                    Some(d) if d == dim => {}
                    Some(d) => {
                        return Err(at(format!("label dim {dim} differs from earlier {d}")))
                    }
                }
                let mut flat = Vec::with_capacity(fg.num_nodes * dim);
                for row in &labels {
                    if row.len() != dim {
                        return Err(at("ragged label rows".into()));
                    }
                    flat.extend_from_slice(row);
                }
                graph.node_labels = Some((dim, flat));
            }
            TaskKind::GraphRegression => {
                let targets = fg
                    .targets
                    .ok_or_else(|| at("graph_regression requires targets".into()))?;
                if targets.len() != 1 {
                    return Err(at(format!(
                        "expected exactly one regression target, got {}",
                        targets.len()
                    )));
                }
                label_dim = Some(1);
                graph.graph_target = Some(targets[0]);
            }
            TaskKind::WlPairProbe => {
                if fg.node_labels.is_some() || fg.targets.is_some() {
                    return Err(at("probe graphs carry no labels".into()));
                }
            }
        }
        graphs.push(graph);
    }

    Ok(Dataset {
        task: parsed.task,
        edge_types,
        graphs,
        label_dim: label_dim.unwrap_or(0),
    })
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let graphs = ds
        .graphs
        .iter()
        .map(|g| {
            let features = (0..g.num_nodes)
                .map(|v| g.node_features[v * g.feature_dim..(v + 1) * g.feature_dim].to_vec())
                .collect();
            let mut edges = IndexMap::new();
            for (name, list) in g.edge_types.iter().zip(&g.edges) {
                if !list.is_empty() {
                    edges.insert(name.clone(), list.iter().map(|&(s, t)| [s, t]).collect());
                }
            }
            let node_labels = g.node_labels.as_ref().map(|(dim, flat)| {
                (0..g.num_nodes)
                    .map(|v| flat[v * dim..(v + 1) * dim].to_vec())
                    .collect()
            });
            FileGraph {
                num_nodes: g.num_nodes,
                features,
                edges,
                node_labels,
                targets: g.graph_target.map(|t| vec![t]),
            }
        })
        .collect();
    let doc = FileDataset {
        task: ds.task,
        edge_types: ds.edge_types.clone(),
        graphs,
    };
    let file = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), &doc)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> (tempfile::TempDir, std::path::PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.json");
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        (dir, path)
    }

    #[test]
    fn ppi_shaped_file_loads_with_task_metadata() {
        let features: Vec<Vec<f64>> = (0..2).map(|i| vec![i as f64; 50]).collect();
        let labels: Vec<Vec<f64>> = (0..2).map(|_| vec![1.0; 121]).collect();
        let doc = serde_json::json!({
            "task": "node_classification",
            "edge_types": ["untyped"],
            "graphs": [{
                "num_nodes": 2,
                "features": features,
                "edges": {"untyped": [[0, 1], [1, 0]]},
                "node_labels": labels,
            }],
        });
        let (_dir, path) = write_tmp(&doc.to_string());
        let ds = load_dataset(&path).unwrap();
        assert_eq!(ds.task, TaskKind::NodeClassification);
        assert_eq!(ds.label_dim, 121);
        assert_eq!(ds.graphs[0].feature_dim, 50);
    }

    #[test]
    fn out_of_range_edge_names_the_edge() {
        let doc = serde_json::json!({
            "task": "wl_pair_probe",
            "edge_types": ["1"],
            "graphs": [{
                "num_nodes": 3,
                "features": [[0.0], [0.0], [0.0]],
                "edges": {"1": [[5, 0]]},
            }],
        });
        let (_dir, path) = write_tmp(&doc.to_string());
        let err = load_dataset(&path).unwrap_err();
        assert!(err.to_string().contains("[5, 0]"), "got: {err}");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let doc = serde_json::json!({
            "task": "wl_pair_probe",
            "edge_types": [],
            "graphs": [],
            "surprise": 1,
        });
        let (_dir, path) = write_tmp(&doc.to_string());
        assert!(load_dataset(&path).is_err());
    }

    #[test]
    fn inverse_edges_are_materialised_per_type() {
        let doc = serde_json::json!({
            "task": "wl_pair_probe",
            "edge_types": ["a"],
            "graphs": [{
                "num_nodes": 2,
                "features": [[0.0], [0.0]],
                "edges": {"a": [[0, 1]]},
            }],
        });
        let (_dir, path) = write_tmp(&doc.to_string());
        let ds = load_dataset_opts(
            &path,
            LoadOptions {
                add_inverse_edges: true,
            },
        )
        .unwrap();
        assert_eq!(ds.edge_types, vec!["a".to_string(), "INV_a".to_string()]);
        let g = &ds.graphs[0];
        assert_eq!(g.edges[0], vec![(0, 1)]);
        assert_eq!(g.edges[1], vec![(1, 0)]);
    }
}
