//! Named collection of learnable tensors, kept outside the tape and
//! re-registered onto a fresh tape every step.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, TensorId};
use super::Scalar;
use crate::error::{Error, Result};
use crate::rng::StreamKey;

/// How a parameter is filled at model-build time.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Uniform Glorot over the tensor's (fan_in, fan_out).
    Glorot,
    Zeros,
    Ones,
    /// First half of the vector zero, second half one. Used for the FiLM
    /// hypernet bias so an untrained layer starts with beta=0, gamma=1.
    HalfZeroHalfOne,
}

/// Declaration of one learnable tensor.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        ParamSpec {
            name: name.into(),
            shape,
            init,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Ordered name -> tensor map. Iteration order is registration order, which
/// fixes the optimiser update order and keeps runs bitwise reproducible.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ParameterStore {
    params: IndexMap<String, ParamTensor>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Materialise specs, drawing each parameter from its own named stream.
    pub fn from_specs(specs: &[ParamSpec], init_stream: &StreamKey) -> Result<Self> {
        let mut store = ParameterStore::new();
        for spec in specs {
            let numel: usize = spec.shape.iter().product();
            let values = match spec.init {
                Init::Zeros => vec![0.0; numel],
                Init::Ones => vec![1.0; numel],
                Init::HalfZeroHalfOne => {
                    let mut v = vec![0.0; numel];
                    for x in v.iter_mut().skip(numel / 2) {
                        *x = 1.0;
                    }
                    v
                }
                Init::Glorot => {
                    let (fan_in, fan_out) = match spec.shape.as_slice() {
                        [r, c] => (*r, *c),
                        [n] => (*n, 1),
                        other => (other.iter().product(), 1),
                    };
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = init_stream.child(&spec.name).rng();
                    (0..numel).map(|_| rng.gen_range(-limit..limit)).collect()
                }
            };
            store.insert(&spec.name, spec.shape.clone(), values)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<f64>) -> Result<()> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "param insert",
                left: shape,
                right: vec![values.len()],
            });
        }
        if self.params.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name '{name}'")));
        }
        self.params.insert(name.to_string(), ParamTensor { shape, values });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor> {
        self.params.get_mut(name)
    }

    /// Overwrite the values of an existing parameter, shape-checked.
    pub fn set_values(&mut self, name: &str, values: Vec<f64>) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter '{name}'")))?;
        if t.values.len() != values.len() {
            return Err(Error::ShapeMismatch {
                op: "param set",
                left: t.shape.clone(),
                right: vec![values.len()],
            });
        }
        t.values = values;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamTensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|t| t.values.len()).sum()
    }

    /// Register every parameter on a tape, in store order.
    pub fn bind<F: Scalar>(&self, tape: &mut Tape<F>) -> Result<BoundParams> {
        let mut ids = IndexMap::new();
        for (name, t) in &self.params {
            let values: Vec<F> = t.values.iter().map(|&v| F::c(v)).collect();
            let id = tape.param(values, t.shape.clone())?;
            ids.insert(name.clone(), id);
        }
        Ok(BoundParams { ids })
    }

    /// Collect gradients for every parameter after a backward pass. Parameters
    /// the loss never reached are reported as an error so dead submodules are
    /// caught early.
    pub fn collect_grads<F: Scalar>(&self, tape: &Tape<F>, bound: &BoundParams) -> Result<GradMap> {
        let mut grads = IndexMap::new();
        for (name, &id) in &bound.ids {
            match tape.grad(id) {
                Some(g) => {
                    grads.insert(name.clone(), g.iter().map(|&v| v.as_f64()).collect::<Vec<f64>>());
                }
                None => return Err(Error::MissingGradient(name.clone())),
            }
        }
        Ok(GradMap { grads })
    }

    /// Serialise as a checkpoint document.
    pub fn save_checkpoint(&self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), &self.params)?;
        Ok(())
    }

    /// Load a checkpoint into an existing store. Names must match the store
    /// exactly; unknown or missing names are rejected.
    pub fn load_checkpoint(&mut self, path: &std::path::Path) -> Result<()> {
        let file = std::fs::File::open(path)?;
        let loaded: IndexMap<String, ParamTensor> =
            serde_json::from_reader(std::io::BufReader::new(file))?;
        for name in loaded.keys() {
            if !self.params.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint contains unknown parameter '{name}'"
                )));
            }
        }
        for name in self.params.keys() {
            if !loaded.contains_key(name) {
                return Err(Error::Checkpoint(format!(
                    "checkpoint is missing parameter '{name}'"
                )));
            }
        }
        for (name, t) in loaded {
            let own = &self.params[&name];
            if own.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' has shape {:?} in checkpoint, expected {:?}",
                    name, t.shape, own.shape
                )));
            }
            self.params[&name] = t;
        }
        Ok(())
    }
}

/// Name -> tape id mapping produced by [`ParameterStore::bind`].
#[derive(Debug, Clone)]
pub struct BoundParams {
    ids: IndexMap<String, TensorId>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter '{name}' not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, TensorId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Gradients keyed by parameter name, in store order.
#[derive(Debug, Clone)]
pub struct GradMap {
    grads: IndexMap<String, Vec<f64>>,
}

impl GradMap {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> GradMap {
        GradMap {
            grads: pairs.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.grads.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Global L2 norm over all gradients.
    pub fn global_norm(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|v| v.iter())
            .map(|&g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Scale every gradient so the global norm does not exceed `clip_norm`.
    pub fn clip_global_norm(&mut self, clip_norm: f64) {
        let norm = self.global_norm();
        if norm > clip_norm {
            let scale = clip_norm / norm;
            for v in self.grads.values_mut() {
                for g in v.iter_mut() {
                    *g *= scale;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_draws_are_per_parameter_streams() {
        let specs = vec![
            ParamSpec::new("a", vec![2, 2], Init::Glorot),
            ParamSpec::new("b", vec![2, 2], Init::Glorot),
        ];
        let stream = StreamKey::from_seed(1).child("init");
        let s1 = ParameterStore::from_specs(&specs, &stream).unwrap();
        // Dropping "a" must not change "b".
        let s2 = ParameterStore::from_specs(&specs[1..], &stream).unwrap();
        assert_eq!(s1.get("b").unwrap().values, s2.get("b").unwrap().values);
        assert_ne!(s1.get("a").unwrap().values, s1.get("b").unwrap().values);
    }

    #[test]
    fn half_zero_half_one_init() {
        let specs = vec![ParamSpec::new("g", vec![6], Init::HalfZeroHalfOne)];
        let store = ParameterStore::from_specs(&specs, &StreamKey::from_seed(0)).unwrap();
        assert_eq!(store.get("g").unwrap().values, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn checkpoint_rejects_unknown_and_missing_names() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let specs = vec![
            ParamSpec::new("w", vec![2], Init::Zeros),
            ParamSpec::new("b", vec![1], Init::Zeros),
        ];
        let key = StreamKey::from_seed(0);
        let store = ParameterStore::from_specs(&specs, &key).unwrap();
        store.save_checkpoint(&path).unwrap();

        let mut missing = ParameterStore::from_specs(
            &[
                ParamSpec::new("w", vec![2], Init::Zeros),
                ParamSpec::new("b", vec![1], Init::Zeros),
                ParamSpec::new("extra", vec![1], Init::Zeros),
            ],
            &key,
        )
        .unwrap();
        assert!(missing.load_checkpoint(&path).is_err());

        let mut unknown =
            ParameterStore::from_specs(&[ParamSpec::new("w", vec![2], Init::Zeros)], &key).unwrap();
        assert!(unknown.load_checkpoint(&path).is_err());

        let mut ok = ParameterStore::from_specs(&specs, &key).unwrap();
        ok.load_checkpoint(&path).unwrap();
        assert_eq!(ok.get("w").unwrap().values, vec![0.0, 0.0]);
    }
}
