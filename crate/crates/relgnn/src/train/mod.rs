//! Optimisers, the training loop with early stopping, and seeded
//! reproducibility. Two runs with the same seed and config produce bitwise
//! identical parameter trajectories and metrics.

mod search;

pub use search::{hyper_search, SearchDomain, SearchMode, SearchSpace, Trial, TrialTable};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{batch_disjoint_union, Dataset, TypedGraph};
use crate::rng::StreamKey;
use crate::tasks::{classify_logits, BatchLabels, F1Counts, TaskModel};
use crate::tensor::{GradMap, ParameterStore, Tape};
use rand::seq::SliceRandom;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    RmsProp,
}

impl OptimizerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "Adam" => Ok(OptimizerKind::Adam),
            "RMSProp" => Ok(OptimizerKind::RmsProp),
            other => Err(Error::Config(format!(
                "unknown optimizer '{other}' (expected Adam or RMSProp)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizerKind::Adam => "Adam",
            OptimizerKind::RmsProp => "RMSProp",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without strict validation improvement;
    /// `None` disables early stopping.
    pub patience: Option<usize>,
    /// Whole graphs are batched together until their node count exceeds this.
    pub batch_node_budget: usize,
    pub seed: u64,
    /// Optional global gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl TrainConfig {
    pub fn new(optimizer: OptimizerKind, lr: f64, max_epochs: usize, patience: Option<usize>, seed: u64) -> Result<Self> {
        if lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        if patience == Some(0) {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        Ok(TrainConfig {
            optimizer,
            lr,
            max_epochs,
            patience,
            batch_node_budget: 10_000,
            seed,
            clip_norm: None,
        })
    }
}

/// Optimiser state, one slot per named parameter.
#[derive(Debug, Clone)]
pub enum Optimizer {
    /// beta1 = 0.9, beta2 = 0.999, eps = 1e-8.
    Adam {
        m: IndexMap<String, Vec<f64>>,
        v: IndexMap<String, Vec<f64>>,
        t: u64,
    },
    /// decay = 0.9, eps = 1e-10, no momentum.
    RmsProp { ms: IndexMap<String, Vec<f64>> },
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const RMSPROP_DECAY: f64 = 0.9;
const RMSPROP_EPS: f64 = 1e-10;

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Optimizer {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam {
                m: IndexMap::new(),
                v: IndexMap::new(),
                t: 0,
            },
            OptimizerKind::RmsProp => Optimizer::RmsProp { ms: IndexMap::new() },
        }
    }

    /// One update. Every registered parameter must have a gradient; a missing
    /// one means a submodule never participated in the loss.
    pub fn step(&mut self, store: &mut ParameterStore, grads: &GradMap, lr: f64) -> Result<()> {
        let names: Vec<String> = store.names().map(str::to_string).collect();
        for name in &names {
            if grads.get(name).is_none() {
                return Err(Error::MissingGradient(name.clone()));
            }
        }
        match self {
            Optimizer::Adam { m, v, t } => {
                *t += 1;
                let correction = (1.0 - ADAM_BETA2.powi(*t as i32)).sqrt() / (1.0 - ADAM_BETA1.powi(*t as i32));
                let lr_t = lr * correction;
                for name in &names {
                    let g = grads.get(name).unwrap();
                    let m_slot = m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let v_slot = v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let p = &mut store.get_mut(name).unwrap().values;
                    for i in 0..g.len() {
                        m_slot[i] = ADAM_BETA1 * m_slot[i] + (1.0 - ADAM_BETA1) * g[i];
                        v_slot[i] = ADAM_BETA2 * v_slot[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        p[i] -= lr_t * m_slot[i] / (v_slot[i].sqrt() + ADAM_EPS);
                    }
                }
            }
            Optimizer::RmsProp { ms } => {
                for name in &names {
                    let g = grads.get(name).unwrap();
                    let ms_slot = ms.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let p = &mut store.get_mut(name).unwrap().values;
                    for i in 0..g.len() {
                        ms_slot[i] = RMSPROP_DECAY * ms_slot[i] + (1.0 - RMSPROP_DECAY) * g[i] * g[i];
                        p[i] -= lr * g[i] / (ms_slot[i] + RMSPROP_EPS).sqrt();
                    }
                }
            }
        }
        Ok(())
    }
}

/// Train/valid/test splits sharing one schema.
#[derive(Debug, Clone)]
pub struct DataSplits {
    pub train: Dataset,
    pub valid: Dataset,
    pub test: Option<Dataset>,
}

impl DataSplits {
    pub fn validate(&self) -> Result<()> {
        let mut all = vec![&self.train, &self.valid];
        if let Some(t) = &self.test {
            all.push(t);
        }
        for ds in &all {
            if ds.task != self.train.task
                || ds.edge_types != self.train.edge_types
                || ds.label_dim != self.train.label_dim
            {
                return Err(Error::Config("dataset splits do not share a schema".into()));
            }
            if ds.graphs.is_empty() {
                return Err(Error::Config("dataset split has no graphs".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_metric: f64,
    pub seconds: f64,
}

/// Everything a finished run reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metric_name: String,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_metric: f64,
    pub test_metric: Option<f64>,
    pub stopped_early: bool,
    pub wall_clock_secs: f64,
}

/// Strict-improvement early stopping.
struct EarlyStopper {
    higher_better: bool,
    patience: Option<usize>,
    best: f64,
    best_epoch: usize,
    since_best: usize,
}

impl EarlyStopper {
    fn new(higher_better: bool, patience: Option<usize>) -> Self {
        EarlyStopper {
            higher_better,
            patience,
            best: if higher_better { f64::NEG_INFINITY } else { f64::INFINITY },
            best_epoch: 0,
            since_best: 0,
        }
    }

    /// Returns (improved, should_stop).
    fn observe(&mut self, epoch: usize, metric: f64) -> (bool, bool) {
        let improved = if self.higher_better {
            metric > self.best
        } else {
            metric < self.best
        };
        if improved {
            self.best = metric;
            self.best_epoch = epoch;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        let stop = self.patience.is_some_and(|p| self.since_best >= p);
        (improved, stop)
    }
}

/// Greedy whole-graph batches up to the node budget, in the given order.
fn plan_batches(order: &[usize], graphs: &[TypedGraph], budget: usize) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut nodes = 0;
    for &gi in order {
        let n = graphs[gi].num_nodes;
        if !current.is_empty() && nodes + n > budget {
            batches.push(std::mem::take(&mut current));
            nodes = 0;
        }
        current.push(gi);
        nodes += n;
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

/// Metric over a whole dataset in evaluation mode (dropout off), pooled over
/// batches: micro-F1 pools the TP/FP/FN counts, MAE pools absolute errors.
pub fn evaluate(tm: &TaskModel, store: &ParameterStore, data: &Dataset, budget: usize) -> Result<f64> {
    let order: Vec<usize> = (0..data.graphs.len()).collect();
    let mut f1 = F1Counts::default();
    let mut abs_err_sum = 0.0;
    let mut count = 0usize;
    let mut eval_rng = StreamKey::from_seed(0).child("eval-unused").rng();
    for batch_ids in plan_batches(&order, &data.graphs, budget) {
        let members: Vec<TypedGraph> = batch_ids.iter().map(|&i| data.graphs[i].clone()).collect();
        let batched = batch_disjoint_union(&members)?;
        let batch = tm.prepare_batch(&batched)?;
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let preds = tm.forward(&mut tape, &bound, &batch, false, &mut eval_rng)?;
        let pred_vals = tape.values(preds);
        match &batch.labels {
            BatchLabels::Node(labels) if tm.spec.higher_is_better() => {
                f1.update(&classify_logits(pred_vals), labels);
            }
            BatchLabels::Node(labels) | BatchLabels::Graph(labels) => {
                abs_err_sum += pred_vals
                    .iter()
                    .zip(labels)
                    .map(|(&p, &t)| (p - t).abs())
                    .sum::<f64>();
                count += labels.len();
            }
            BatchLabels::None => return Err(Error::Config("cannot evaluate a probe dataset".into())),
        }
    }
    if tm.spec.higher_is_better() {
        Ok(f1.score())
    } else if count == 0 {
        Ok(0.0)
    } else {
        Ok(abs_err_sum / count as f64)
    }
}

/// Full training loop: epoch = shuffled whole-graph batches, one optimiser
/// step per batch; validation after every epoch; early stopping with strict
/// improvement; best-validation parameters restored before test evaluation.
pub fn train(
    tm: &TaskModel,
    store: &mut ParameterStore,
    data: &DataSplits,
    config: &TrainConfig,
) -> Result<RunRecord> {
    data.validate()?;
    let start = std::time::Instant::now();
    let root = StreamKey::from_seed(config.seed);
    let mut shuffle_rng = root.child("shuffle").rng();
    let mut dropout_rng = root.child("dropout").rng();
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut stopper = EarlyStopper::new(tm.spec.higher_is_better(), config.patience);
    let mut best_store = store.clone();
    let mut history = Vec::new();
    let mut stopped_early = false;

    for epoch in 1..=config.max_epochs {
        let epoch_start = std::time::Instant::now();
        let mut order: Vec<usize> = (0..data.train.graphs.len()).collect();
        order.shuffle(&mut shuffle_rng);

        let mut loss_sum = 0.0;
        let mut loss_batches = 0usize;
        for batch_ids in plan_batches(&order, &data.train.graphs, config.batch_node_budget) {
            let members: Vec<TypedGraph> =
                batch_ids.iter().map(|&i| data.train.graphs[i].clone()).collect();
            let batched = batch_disjoint_union(&members)?;
            let batch = tm.prepare_batch(&batched)?;
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape)?;
            let (_preds, loss) = tm.forward_loss(&mut tape, &bound, &batch, true, &mut dropout_rng)?;
            let loss_val = tape.values(loss)[0];
            if !loss_val.is_finite() {
                let param_norm = store
                    .iter()
                    .map(|(_, t)| t.values.iter().map(|v| v * v).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                return Err(Error::NonFinite {
                    epoch,
                    detail: format!("loss={loss_val}, global parameter norm={param_norm:.6e}"),
                });
            }
            loss_sum += loss_val;
            loss_batches += 1;
            tape.backward(loss)?;
            let mut grads = store.collect_grads(&tape, &bound)?;
            if let Some(clip) = config.clip_norm {
                grads.clip_global_norm(clip);
            }
            optimizer.step(store, &grads, config.lr)?;
        }

        let valid_metric = evaluate(tm, store, &data.valid, config.batch_node_budget)?;
        let (improved, stop) = stopper.observe(epoch, valid_metric);
        if improved {
            best_store = store.clone();
        }
        history.push(EpochRecord {
            epoch,
            train_loss: loss_sum / loss_batches.max(1) as f64,
            valid_metric,
            seconds: epoch_start.elapsed().as_secs_f64(),
        });
        if stop {
            stopped_early = true;
            break;
        }
    }

    // Hand back the best-validation parameters for test evaluation and saving.
    *store = best_store;
    let test_metric = match &data.test {
        Some(test) => Some(evaluate(tm, store, test, config.batch_node_budget)?),
        None => None,
    };

    Ok(RunRecord {
        seed: config.seed,
        metric_name: tm.spec.metric_name().to_string(),
        history,
        best_epoch: stopper.best_epoch,
        best_valid_metric: stopper.best,
        test_metric,
        stopped_early,
        wall_clock_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests;
