use std::collections::BTreeMap;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Outcome of comparing tape gradients against central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// `|a - n| / max(1e-12, |a| + |n|)` with Euclidean norms over the compared entries.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |it: &mut dyn Iterator<Item = f64>| it.map(|v| v * v).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = norm(&mut analytic.iter().copied()) + norm(&mut numeric.iter().copied());
    diff / scale.max(1e-12)
}

/// Checks every entry of every parameter. `model_fn` builds a scalar loss from the input,
/// looking parameters up on the tape by name.
pub fn grad_check<F>(model_fn: F, params: &ParamStore<f64>, input: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_sampled(model_fn, params, input, eps, usize::MAX)
}

/// Like [`grad_check`] but compares at most `max_entries` evenly spaced entries per parameter.
pub fn grad_check_sampled<F>(
    model_fn: F,
    params: &ParamStore<f64>,
    input: &Tensor<f64>,
    eps: f64,
    max_entries: usize,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument {
            op: "grad_check",
            reason: format!("eps must be positive, got {eps}"),
        });
    }
    let mut tape = Tape::new();
    params.register(&mut tape)?;
    let x = tape.constant(input.clone());
    let loss = model_fn(&mut tape, x)?;
    let analytic = tape.backward(loss)?;

    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        store.register(&mut tape)?;
        let x = tape.constant(input.clone());
        let loss = model_fn(&mut tape, x)?;
        Ok(tape.value(loss)[0])
    };

    let mut probe = params.clone();
    let mut per_param = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let len = tensor.len();
        let picks: Vec<usize> = if len <= max_entries {
            (0..len).collect()
        } else {
            (0..max_entries).map(|i| i * len / max_entries).collect()
        };
        let grad = analytic.get(name);
        let mut a = Vec::with_capacity(picks.len());
        let mut n = Vec::with_capacity(picks.len());
        for &idx in &picks {
            let orig = tensor[idx];
            probe.get_mut(name)?.data_mut()[idx] = orig + eps;
            let plus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = orig - eps;
            let minus = eval(&probe)?;
            probe.get_mut(name)?.data_mut()[idx] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let ad = grad.map_or(0.0, |g| g[idx]);
            if !fd.is_finite() || !ad.is_finite() {
                return Err(Error::NonFiniteGradient { param: name.clone() });
            }
            a.push(ad);
            n.push(fd);
        }
        per_param.insert(name.clone(), relative_error(&a, &n));
    }
    let max_rel_error = per_param.values().copied().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}
