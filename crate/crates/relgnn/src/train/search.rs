//! Hyperparameter search over JSON experiment configs: exhaustive grids or
//! seeded random sampling, with optional fan-out across worker threads.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::error::{Error, Result};
use crate::rng::StreamKey;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchMode {
    Grid,
    Random,
}

/// Candidate values for one knob: an explicit list or a numeric interval.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SearchDomain {
    Values(Vec<Value>),
    Range { min: f64, max: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchSpace {
    pub mode: SearchMode,
    /// Knob name -> candidates, applied on top of the base config.
    pub parameters: IndexMap<String, SearchDomain>,
    /// Number of sampled configurations (random mode only).
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default = "default_runs")]
    pub runs_per_config: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_runs() -> usize {
    1
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        if self.parameters.is_empty() {
            return Err(Error::Config("search space has no parameters".into()));
        }
        if self.mode == SearchMode::Random && self.budget.is_none() {
            return Err(Error::Config("random search requires a trial budget".into()));
        }
        if self.runs_per_config == 0 {
            return Err(Error::Config("runs_per_config must be at least 1".into()));
        }
        for (name, domain) in &self.parameters {
            match domain {
                SearchDomain::Values(v) if v.is_empty() => {
                    return Err(Error::Config(format!("parameter '{name}' has no values")));
                }
                SearchDomain::Range { min, max } if min >= max => {
                    return Err(Error::Config(format!("parameter '{name}' has an empty range")));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// All candidate configurations, in deterministic order.
    pub fn enumerate(&self, base: &serde_json::Map<String, Value>) -> Result<Vec<Value>> {
        self.validate()?;
        match self.mode {
            SearchMode::Grid => {
                let mut configs = vec![base.clone()];
                for (name, domain) in &self.parameters {
                    let values = match domain {
                        SearchDomain::Values(v) => v.clone(),
                        SearchDomain::Range { .. } => {
                            return Err(Error::Config(format!(
                                "grid mode requires explicit values for '{name}'"
                            )))
                        }
                    };
                    let mut next = Vec::with_capacity(configs.len() * values.len());
                    for cfg in &configs {
                        for v in &values {
                            let mut c = cfg.clone();
                            c.insert(name.clone(), v.clone());
                            next.push(c);
                        }
                    }
                    configs = next;
                }
                Ok(configs.into_iter().map(Value::Object).collect())
            }
            SearchMode::Random => {
                let budget = self.budget.unwrap();
                let stream = StreamKey::from_seed(self.seed).child("search");
                let mut configs = Vec::with_capacity(budget);
                for i in 0..budget {
                    let mut rng = stream.child(&format!("trial{i}")).rng();
                    let mut c = base.clone();
                    for (name, domain) in &self.parameters {
                        let v = match domain {
                            SearchDomain::Values(vals) => vals[rng.gen_range(0..vals.len())].clone(),
                            SearchDomain::Range { min, max } => {
                                Value::from(rng.gen_range(*min..*max))
                            }
                        };
                        c.insert(name.clone(), v);
                    }
                    configs.push(Value::Object(c));
                }
                Ok(configs)
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub config: Value,
    pub run_seeds: Vec<u64>,
    pub metrics: Vec<f64>,
    pub mean_metric: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialTable {
    pub metric_name: String,
    pub higher_is_better: bool,
    /// All trials, ranked best-first; failed trials sink to the bottom.
    pub trials: Vec<Trial>,
}

impl TrialTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,trial,mean_metric,error,config\n");
        for (rank, t) in self.trials.iter().enumerate() {
            let metric = t.mean_metric.map_or(String::new(), |m| format!("{m:.6}"));
            let err = t.error.clone().unwrap_or_default().replace(',', ";");
            out.push_str(&format!(
                "{},{},{},{},\"{}\"\n",
                rank + 1,
                t.index,
                metric,
                err,
                t.config.to_string().replace('"', "\"\"")
            ));
        }
        out
    }
}

/// Run every candidate configuration `runs_per_config` times and rank by the
/// mean validation metric. One trial failing is recorded, not fatal. The
/// runner is called as `(config, run_seed) -> metric`; `jobs` worker threads
/// share the trial queue, and results are keyed by trial index so scheduling
/// order never affects the outcome.
pub fn hyper_search<R>(
    space: &SearchSpace,
    base: &serde_json::Map<String, Value>,
    metric_name: &str,
    higher_is_better: bool,
    jobs: usize,
    runner: R,
) -> Result<TrialTable>
where
    R: Fn(&Value, u64) -> Result<f64> + Sync,
{
    let configs = space.enumerate(base)?;
    let seed_stream = StreamKey::from_seed(space.seed).child("trial-seeds");
    let planned: Vec<(usize, Value, Vec<u64>)> = configs
        .into_iter()
        .enumerate()
        .map(|(i, cfg)| {
            let mut rng = seed_stream.child(&format!("trial{i}")).rng();
            let seeds: Vec<u64> = (0..space.runs_per_config).map(|_| rng.gen()).collect();
            (i, cfg, seeds)
        })
        .collect();

    let results: Mutex<Vec<Option<Trial>>> = Mutex::new(vec![None; planned.len()]);
    let cursor = AtomicUsize::new(0);
    let workers = jobs.max(1).min(planned.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = cursor.fetch_add(1, Ordering::SeqCst);
                if i >= planned.len() {
                    break;
                }
                let (index, config, seeds) = &planned[i];
                let mut metrics = Vec::with_capacity(seeds.len());
                let mut error = None;
                for &seed in seeds {
                    match runner(config, seed) {
                        Ok(m) => metrics.push(m),
                        Err(e) => {
                            error = Some(e.to_string());
                            break;
                        }
                    }
                }
                let mean = if error.is_none() && !metrics.is_empty() {
                    Some(metrics.iter().sum::<f64>() / metrics.len() as f64)
                } else {
                    None
                };
                let trial = Trial {
                    index: *index,
                    config: config.clone(),
                    run_seeds: seeds.clone(),
                    metrics,
                    mean_metric: mean,
                    error,
                };
                results.lock().unwrap()[i] = Some(trial);
            });
        }
    });

    let mut trials: Vec<Trial> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|t| t.expect("every trial ran"))
        .collect();
    trials.sort_by(|a, b| match (a.mean_metric, b.mean_metric) {
        (Some(x), Some(y)) => {
            let ord = x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal);
            let ord = if higher_is_better { ord.reverse() } else { ord };
            ord.then(a.index.cmp(&b.index))
        }
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.index.cmp(&b.index),
    });

    Ok(TrialTable {
        metric_name: metric_name.to_string(),
        higher_is_better,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space(mode: SearchMode, budget: Option<usize>) -> SearchSpace {
        let mut parameters = IndexMap::new();
        parameters.insert(
            "hidden_size".to_string(),
            SearchDomain::Values(vec![Value::from(4), Value::from(8)]),
        );
        parameters.insert(
            "lr".to_string(),
            match mode {
                SearchMode::Grid => SearchDomain::Values(vec![Value::from(0.1), Value::from(0.2)]),
                SearchMode::Random => SearchDomain::Range { min: 0.0005, max: 0.001 },
            },
        );
        SearchSpace {
            mode,
            parameters,
            budget,
            runs_per_config: 1,
            seed: 9,
        }
    }

    #[test]
    fn grid_enumerates_the_cartesian_product() {
        let s = space(SearchMode::Grid, None);
        let configs = s.enumerate(&serde_json::Map::new()).unwrap();
        assert_eq!(configs.len(), 4);
    }

    #[test]
    fn random_sampling_is_seed_deterministic() {
        let s = space(SearchMode::Random, Some(10));
        let a = s.enumerate(&serde_json::Map::new()).unwrap();
        let b = s.enumerate(&serde_json::Map::new()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 10);
    }

    #[test]
    fn failed_trials_are_recorded_and_ranked_last() {
        let s = space(SearchMode::Grid, None);
        let table = hyper_search(&s, &serde_json::Map::new(), "mae", false, 2, |cfg, _seed| {
            let hidden = cfg["hidden_size"].as_u64().unwrap();
            if hidden == 8 {
                Err(Error::Config("boom".into()))
            } else {
                Ok(cfg["lr"].as_f64().unwrap())
            }
        })
        .unwrap();
        assert_eq!(table.trials.len(), 4);
        assert_eq!(table.trials[0].mean_metric, Some(0.1));
        assert!(table.trials[2].error.is_some());
        assert!(table.trials[3].error.is_some());
    }
}
