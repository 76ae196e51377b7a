//! Readouts, losses, metrics, and the task-level model wrapper.

pub mod generators;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{BatchedGraph, TaskKind};
use crate::layers::{LinearParams, Model, PreparedGraph, StackConfig};
use crate::rng::StreamKey;
use crate::tensor::{BoundParams, Init, ParamSpec, ParameterStore, Tape, TensorId};

/// What a model is trained to produce and how it is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub label_dim: usize,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, label_dim: usize) -> Result<Self> {
        if matches!(kind, TaskKind::WlPairProbe) {
            return Err(Error::Config("probe datasets cannot be trained on".into()));
        }
        if label_dim == 0 {
            return Err(Error::Config("label_dim must be positive".into()));
        }
        Ok(TaskSpec { kind, label_dim })
    }

    /// Reported validation/test metric and its direction.
    pub fn metric_name(&self) -> &'static str {
        match self.kind {
            TaskKind::NodeClassification => "micro_f1",
            _ => "mae",
        }
    }

    pub fn higher_is_better(&self) -> bool {
        matches!(self.kind, TaskKind::NodeClassification)
    }
}

/// Task readout over final node representations.
#[derive(Debug, Clone)]
pub enum Head {
    /// Linear logits per node; binary cross-entropy.
    NodeClassification,
    /// Linear value(s) per node; squared error optimised, MAE reported.
    NodeRegression,
    /// Gated sum readout per graph: sum_v sigmoid(gate(h_v)) * out(h_v).
    GraphRegression,
}

impl Head {
    pub fn for_task(spec: &TaskSpec) -> Head {
        match spec.kind {
            TaskKind::NodeClassification => Head::NodeClassification,
            TaskKind::NodeRegression => Head::NodeRegression,
            TaskKind::GraphRegression => Head::GraphRegression,
            TaskKind::WlPairProbe => unreachable!("probe tasks are rejected by TaskSpec::new"),
        }
    }

    pub fn param_specs(&self, hidden: usize, label_dim: usize) -> Vec<ParamSpec> {
        let linear = |prefix: &str, d_out: usize| {
            vec![
                ParamSpec::new(format!("{prefix}/weight"), vec![hidden, d_out], Init::Glorot),
                ParamSpec::new(format!("{prefix}/bias"), vec![d_out], Init::Zeros),
            ]
        };
        match self {
            Head::NodeClassification | Head::NodeRegression => linear("head/out", label_dim),
            Head::GraphRegression => {
                let mut specs = linear("head/gate", 1);
                specs.extend(linear("head/out", 1));
                specs
            }
        }
    }

    fn resolve(bound: &BoundParams, prefix: &str) -> Result<LinearParams> {
        Ok(LinearParams {
            weight: bound.id(&format!("{prefix}/weight"))?,
            bias: Some(bound.id(&format!("{prefix}/bias"))?),
        })
    }

    /// Raw model outputs: logits `[n x label_dim]`, node values, or one value
    /// per graph.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        h: TensorId,
        graph_of_node: &[usize],
        num_graphs: usize,
    ) -> Result<TensorId> {
        match self {
            Head::NodeClassification | Head::NodeRegression => {
                Self::resolve(bound, "head/out")?.forward(tape, h)
            }
            Head::GraphRegression => {
                let gate_pre = Self::resolve(bound, "head/gate")?.forward(tape, h)?;
                let gate = tape.sigmoid(gate_pre);
                let out = Self::resolve(bound, "head/out")?.forward(tape, h)?;
                let gated = tape.mul(gate, out)?;
                let per_graph = tape.segment_sum(gated, graph_of_node, num_graphs)?;
                if graph_of_node.len() < num_graphs {
                    log::warn!("batch contains an empty graph; its readout is 0");
                }
                Ok(per_graph)
            }
        }
    }
}

/// Numerically stable mean binary cross-entropy on logits:
/// `mean(y*softplus(-z) + (1-y)*softplus(z))`.
pub fn bce_with_logits_loss(tape: &mut Tape<f64>, logits: TensorId, labels: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(logits).to_vec();
    let y = tape.constant(labels.to_vec(), shape.clone())?;
    let ones = tape.constant(vec![1.0; labels.len()], shape)?;
    let neg_z = tape.neg(logits);
    let sp_neg = tape.softplus(neg_z);
    let sp_pos = tape.softplus(logits);
    let pos_term = tape.mul(y, sp_neg)?;
    let y_comp = tape.sub(ones, y)?;
    let neg_term = tape.mul(y_comp, sp_pos)?;
    let total = tape.add(pos_term, neg_term)?;
    Ok(tape.mean(total))
}

/// Mean squared error against fixed targets.
pub fn mse_loss(tape: &mut Tape<f64>, preds: TensorId, targets: &[f64]) -> Result<TensorId> {
    let shape = tape.shape(preds).to_vec();
    let t = tape.constant(targets.to_vec(), shape)?;
    let diff = tape.sub(preds, t)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Micro-averaged F1 over all prediction/label pairs: `2TP / (2TP + FP + FN)`,
/// defined as 1.0 when all three counts are zero.
pub fn micro_f1(preds: &[f64], labels: &[f64]) -> Result<f64> {
    if preds.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "micro_f1",
            left: vec![preds.len()],
            right: vec![labels.len()],
        });
    }
    let mut counts = F1Counts::default();
    counts.update(preds, labels);
    Ok(counts.score())
}

/// Pooled true/false positive/negative counts, accumulated across batches.
#[derive(Debug, Clone, Copy, Default)]
pub struct F1Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl F1Counts {
    pub fn update(&mut self, preds: &[f64], labels: &[f64]) {
        for (&p, &y) in preds.iter().zip(labels) {
            let p = p != 0.0;
            let y = y != 0.0;
            match (p, y) {
                (true, true) => self.tp += 1,
                (true, false) => self.fp += 1,
                (false, true) => self.fn_ += 1,
                (false, false) => {}
            }
        }
    }

    pub fn score(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0 // no positives anywhere, by convention
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Mean absolute error.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    if preds.len() != targets.len() {
        return Err(Error::ShapeMismatch {
            op: "mae",
            left: vec![preds.len()],
            right: vec![targets.len()],
        });
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    Ok(preds
        .iter()
        .zip(targets)
        .map(|(&p, &t)| (p - t).abs())
        .sum::<f64>()
        / preds.len() as f64)
}

/// Threshold probabilities at 0.5 (equivalently logits at 0); ties count as
/// positive so the rule is reproducible.
pub fn classify_logits(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| if z >= 0.0 { 1.0 } else { 0.0 }).collect()
}

/// A stack plus its task readout. Parameter specs of both live in one store
/// so the optimiser sees every learnable tensor.
#[derive(Debug, Clone)]
pub struct TaskModel {
    pub model: Model,
    pub head: Head,
    pub spec: TaskSpec,
}

/// One batch ready for a forward pass.
#[derive(Debug, Clone)]
pub struct PreparedBatch {
    pub prepared: PreparedGraph,
    pub graph_of_node: Vec<usize>,
    pub num_graphs: usize,
    pub labels: BatchLabels,
}

#[derive(Debug, Clone)]
pub enum BatchLabels {
    Node(Vec<f64>),
    Graph(Vec<f64>),
    None,
}

impl TaskModel {
    pub fn build(
        config: StackConfig,
        spec: TaskSpec,
        feature_dim: usize,
        dataset_edge_types: &[String],
    ) -> Result<TaskModel> {
        let model = Model::build(config, feature_dim, dataset_edge_types)?;
        let head = Head::for_task(&spec);
        Ok(TaskModel { model, head, spec })
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.model.param_specs();
        specs.extend(self.head.param_specs(self.model.config.hidden_size, self.spec.label_dim));
        specs
    }

    pub fn init_store(&self, stream: &StreamKey) -> Result<ParameterStore> {
        ParameterStore::from_specs(&self.param_specs(), &stream.child("init"))
    }

    pub fn prepare_batch(&self, batch: &BatchedGraph) -> Result<PreparedBatch> {
        let labels = match self.spec.kind {
            TaskKind::NodeClassification | TaskKind::NodeRegression => {
                let (dim, flat) = batch
                    .union
                    .node_labels
                    .clone()
                    .ok_or_else(|| Error::Config("task needs node labels".into()))?;
                if dim != self.spec.label_dim {
                    return Err(Error::Config(format!(
                        "label dim {dim} does not match task label_dim {}",
                        self.spec.label_dim
                    )));
                }
                BatchLabels::Node(flat)
            }
            TaskKind::GraphRegression => BatchLabels::Graph(
                batch
                    .graph_targets
                    .clone()
                    .ok_or_else(|| Error::Config("graph_regression needs targets".into()))?,
            ),
            TaskKind::WlPairProbe => BatchLabels::None,
        };
        Ok(PreparedBatch {
            prepared: self.model.prepare(&batch.union)?,
            graph_of_node: batch.graph_of_node.clone(),
            num_graphs: batch.num_graphs,
            labels,
        })
    }

    /// Forward pass producing raw predictions (logits or values).
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        batch: &PreparedBatch,
        training: bool,
        dropout_rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<TensorId> {
        let h = self
            .model
            .forward(tape, bound, &batch.prepared, training, dropout_rng)?;
        self.head
            .forward(tape, bound, h, &batch.graph_of_node, batch.num_graphs)
    }

    /// Forward pass plus the optimisable loss.
    pub fn forward_loss(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        batch: &PreparedBatch,
        training: bool,
        dropout_rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<(TensorId, TensorId)> {
        let preds = self.forward(tape, bound, batch, training, dropout_rng)?;
        let loss = match (&batch.labels, self.spec.kind) {
            (BatchLabels::Node(labels), TaskKind::NodeClassification) => {
                bce_with_logits_loss(tape, preds, labels)?
            }
            (BatchLabels::Node(targets), TaskKind::NodeRegression) => {
                mse_loss(tape, preds, targets)?
            }
            (BatchLabels::Graph(targets), TaskKind::GraphRegression) => {
                mse_loss(tape, preds, targets)?
            }
            _ => return Err(Error::Config("batch labels do not match task".into())),
        };
        Ok((preds, loss))
    }
}
