//! Central finite-difference gradient verification. This is the independent
//! oracle every differentiable operation and every cell is checked against.

use super::params::{BoundParams, ParameterStore};
use super::tape::{Tape, TensorId};
use crate::error::Result;

/// Per-parameter worst relative error between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compare analytic gradients against central differences for every scalar in
/// `store`. `build` must be a deterministic function of the parameters: it is
/// re-evaluated under perturbation. Relative error is
/// `|analytic - fd| / max(1, |fd|)`.
pub fn finite_difference_check<B>(
    store: &ParameterStore,
    build: B,
    eps: f64,
) -> Result<GradCheckReport>
where
    B: Fn(&mut Tape<f64>, &BoundParams) -> Result<TensorId>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape)?;
    let loss = build(&mut tape, &bound)?;
    tape.backward(loss)?;

    let eval = |store: &ParameterStore| -> Result<f64> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape)?;
        let loss = build(&mut tape, &bound)?;
        Ok(tape.values(loss)[0])
    };

    let mut perturbed = store.clone();
    let mut per_param = Vec::new();
    let mut max_rel_err: f64 = 0.0;

    for (name, tensor) in store.iter() {
        let analytic: Vec<f64> = match tape.grad(bound.id(name)?) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tensor.values.len()],
        };
        let mut worst: f64 = 0.0;
        for idx in 0..tensor.values.len() {
            let orig = tensor.values[idx];
            perturbed.get_mut(name).unwrap().values[idx] = orig + eps;
            let plus = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().values[idx] = orig - eps;
            let minus = eval(&perturbed)?;
            perturbed.get_mut(name).unwrap().values[idx] = orig;

            let fd = (plus - minus) / (2.0 * eps);
            let rel = (analytic[idx] - fd).abs() / fd.abs().max(1.0);
            if rel > worst {
                worst = rel;
            }
        }
        max_rel_err = max_rel_err.max(worst);
        per_param.push((name.to_string(), worst));
    }

    Ok(GradCheckReport {
        per_param,
        max_rel_err,
    })
}
