//! Central finite-difference checks of analytic gradients in `f64`.
//!
//! Errors are reported relative to the gradient's scale:
//! `max |analytic − numeric| / max(max |analytic|, max |numeric|)`.

use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::TensorError;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

impl GradCheck {
    fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_abs_error: self.max_abs_error.max(other.max_abs_error),
            max_rel_error: self.max_rel_error.max(other.max_rel_error),
            checked: self.checked + other.checked,
        }
    }
}

/// Compares two gradient samples.
pub fn compare(analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let abs = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(0.0, f64::max);
    let rel = if scale > 0.0 { abs / scale } else { 0.0 };
    GradCheck { max_abs_error: abs, max_rel_error: rel, checked: analytic.len() }
}

/// Checks the gradient of the scalar built by `f` with respect to every entry of every input.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let eval = |values: &[Tensor<f64>]| -> Result<f64, TensorError> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.value(out).item())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    let grads = g.backward(out)?;
    let mut report = GradCheck::default();
    let mut work = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map_or_else(|| vec![0.0; inputs[i].len()], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(inputs[i].len());
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * h));
        }
        report = report.merge(compare(&analytic, &numeric));
    }
    Ok(report)
}

/// Checks parameter gradients of the scalar built by `f`, probing at most
/// `per_param` evenly spaced entries of each named parameter. `f` receives a
/// fresh copy of `store` on every evaluation.
pub fn check_params<F>(
    store: &ParamStore<f64>,
    names: &[String],
    per_param: usize,
    h: f64,
    f: F,
) -> Result<GradCheck, TensorError>
where
    F: Fn(&mut Graph<f64>, &mut ParamStore<f64>) -> Result<Var, TensorError>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64, TensorError> {
        let mut s = s.clone();
        let mut g = Graph::new();
        let out = f(&mut g, &mut s)?;
        Ok(g.value(out).item())
    };
    let grads = {
        let mut s = store.clone();
        let mut g = Graph::new();
        let out = f(&mut g, &mut s)?;
        g.backward(out)?
    };
    let mut report = GradCheck::default();
    let mut work = store.clone();
    for name in names {
        let len = store.get(name).ok_or_else(|| TensorError::MissingParameter(name.clone()))?.len();
        let take = per_param.clamp(1, len.max(1));
        let picks: Vec<usize> = (0..take).map(|k| k * len / take).collect();
        let full = grads.param(name).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; len]);
        let analytic: Vec<f64> = picks.iter().map(|&j| full[j]).collect();
        let mut numeric = Vec::with_capacity(picks.len());
        for &j in &picks {
            let x0 = store.get(name).expect("checked above").data()[j];
            work.get_mut(name).expect("present").data_mut()[j] = x0 + h;
            let fp = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[j] = x0 - h;
            let fm = eval(&work)?;
            work.get_mut(name).expect("present").data_mut()[j] = x0;
            numeric.push((fp - fm) / (2.0 * h));
        }
        report = report.merge(compare(&analytic, &numeric));
    }
    Ok(report)
}
