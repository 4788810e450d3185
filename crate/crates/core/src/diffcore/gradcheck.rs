//! Central finite-difference verification of analytic gradients.

use super::graph::{Graph, Var};
use super::params::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    pub tol: f64,
    /// Denominator floor of the relative error, so that entries whose
    /// gradients are both near zero compare by absolute difference.
    pub floor: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-5,
            max_entries: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
    pub tol: f64,
    /// Set when an analytic gradient is non-finite.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err() <= self.tol
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(store: &ParamStore<f64>, build: &mut F) -> Result<f64>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    g.value(loss).item()
}

/// Compare the gradient of the scalar built by `build` with respect to every
/// parameter of `store` against central differences.
pub fn grad_check<F>(store: &mut ParamStore<f64>, cfg: &GradCheckConfig, mut build: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut g = Graph::new();
    let loss = build(&mut g, store)?;
    let grads = g.backward(loss)?;
    g.accumulate_param_grads(&grads, store);
    drop(g);

    let mut report = GradCheckReport {
        params: Vec::new(),
        tol: cfg.tol,
        failure: None,
    };
    if let Some(name) = store.non_finite_grad() {
        report.failure = Some(format!("non-finite analytic gradient for `{name}`"));
        return Ok(report);
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).numel();
        let picks: Vec<usize> = match cfg.max_entries {
            Some(m) if m < n => (0..m).map(|i| i * n / m).collect(),
            _ => (0..n).collect(),
        };
        let mut worst = 0.0f64;
        for &i in &picks {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + cfg.step;
            let up = evaluate(store, &mut build)?;
            store.value_mut(id).data_mut()[i] = orig - cfg.step;
            let down = evaluate(store, &mut build)?;
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            if !numeric.is_finite() {
                return Err(Error::NonFinite(format!(
                    "finite difference for `{}` is not finite",
                    store.name(id)
                )));
            }
            let analytic = store.grad(id).data()[i];
            worst = worst.max(relative_error(analytic, numeric, cfg.floor));
        }
        report.params.push(ParamCheck {
            name: store.name(id).to_string(),
            max_rel_err: worst,
            checked: picks.len(),
        });
    }
    Ok(report)
}
