//! Central finite-difference checks of analytic gradients.

use std::fmt;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Step used throughout the test suites.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Pass threshold on max relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Relative error denominators are floored here so that gradients that are
/// numerically zero compare by absolute error.
pub const REL_FLOOR: f64 = 1e-4;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.max_rel_err < self.tol)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.max_rel_err >= self.tol)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<40} n={:<6} max_rel_err={:.3e} max_abs_err={:.3e} {}",
                e.name,
                e.checked,
                e.max_rel_err,
                e.max_abs_err,
                if e.max_rel_err < self.tol { "ok" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

fn entry(name: &str, analytic: &[f64], numeric: &[f64]) -> GradCheckEntry {
    let mut max_rel = 0.0f64;
    let mut max_abs = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric) {
        max_rel = max_rel.max(relative_error(a, n));
        max_abs = max_abs.max((a - n).abs());
    }
    GradCheckEntry {
        name: name.to_string(),
        checked: analytic.len(),
        max_rel_err: max_rel,
        max_abs_err: max_abs,
    }
}

/// Checks `f` with respect to each named input tensor. `f` builds a scalar
/// loss from input leaves; it is re-run for every perturbation.
pub fn grad_check<F>(f: F, inputs: &[(&str, Tensor)], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
        let loss = f(&mut g, &vars)?;
        Ok(g.value(loss).item())
    };
    let mut values: Vec<Tensor> = inputs.iter().map(|(_, t)| t.clone()).collect();

    let mut g = Graph::new();
    let vars: Vec<Var> = values.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    let base = g.value(loss).item();
    if eval(&values)?.to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(
            "two forward passes at the same point differ".into(),
        ));
    }
    let grads = g.backward(loss)?;

    let mut entries = Vec::new();
    for (idx, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[idx])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut numeric = vec![0.0; t.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = values[idx].data()[j];
            values[idx].data_mut()[j] = orig + h;
            let up = eval(&values)?;
            values[idx].data_mut()[j] = orig - h;
            let down = eval(&values)?;
            values[idx].data_mut()[j] = orig;
            *slot = (up - down) / (2.0 * h);
        }
        entries.push(entry(name, analytic.data(), &numeric));
    }
    Ok(GradCheckReport { entries, tol })
}

/// Checks every trainable parameter in `store` against a loss built by
/// `f`. Frozen parameters are skipped. `stride` > 1 checks every
/// `stride`-th element of each parameter.
pub fn grad_check_params<F>(
    mut f: F,
    store: &mut ParamStore,
    h: f64,
    tol: f64,
    stride: usize,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore) -> Result<(Graph, Var)>,
{
    let stride = stride.max(1);
    let (g, loss) = f(store)?;
    let base = g.value(loss).item();
    let (g2, loss2) = f(store)?;
    if g2.value(loss2).item().to_bits() != base.to_bits() {
        return Err(Error::NonDeterministic(
            "two forward passes at the same point differ".into(),
        ));
    }
    let grads = g.backward(loss)?;
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    grads.accumulate_into(&g, &mut analytic_store);

    let ids: Vec<_> = store.ids().filter(|&id| !store.get(id).frozen).collect();
    let mut entries = Vec::new();
    for id in ids {
        let numel = store.get(id).value.numel();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in (0..numel).step_by(stride) {
            let orig = store.get(id).value.data()[j];
            store.get_mut(id).value.data_mut()[j] = orig + h;
            let (gu, lu) = f(store)?;
            store.get_mut(id).value.data_mut()[j] = orig - h;
            let (gd, ld) = f(store)?;
            store.get_mut(id).value.data_mut()[j] = orig;
            numeric.push((gu.value(lu).item() - gd.value(ld).item()) / (2.0 * h));
            analytic.push(analytic_store.get(id).grad.data()[j]);
        }
        entries.push(entry(&store.get(id).name, &analytic, &numeric));
    }
    Ok(GradCheckReport { entries, tol })
}
