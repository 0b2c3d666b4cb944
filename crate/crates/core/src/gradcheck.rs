//! Central finite-difference verification of analytic gradients.

use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Graph, Precision, Var};

#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.entries.iter().filter(move |e| !(e.max_rel_error <= self.tolerance))
    }

    pub fn passed(&self) -> bool {
        self.failures().next().is_none()
    }
}

/// `|a - n| / max(1, |a|, |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

/// Compares the tape gradient of `f` against central differences for every
/// weight in `store`.
///
/// `f` builds the loss on a fresh graph and must be deterministic (reseed any
/// noise inside it). The store must be 64-bit.
pub fn finite_difference_check<F>(mut f: F, store: &mut ParameterStore, step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &ParameterStore) -> Result<Var>,
{
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::contract(format!("finite-difference step must be positive, got {step}")));
    }
    if store.precision() != Precision::F64 {
        return Err(Error::contract("gradient checks need a 64-bit parameter store"));
    }

    store.zero_grads();
    let mut g = Graph::new(Precision::F64);
    let loss = f(&mut g, store)?;
    g.backward(loss)?;
    store.absorb_grads(&g);

    let mut eval = |s: &ParameterStore| -> Result<f64> {
        let mut g = Graph::new(Precision::F64);
        let l = f(&mut g, s)?;
        Ok(g.scalar(l))
    };

    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut entries = Vec::with_capacity(names.len());
    for name in names {
        let n = store.get(&name).map_or(0, |p| p.len());
        let mut worst = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..n {
            let orig = store.get(&name).unwrap().value[i];
            store.get_mut(&name).unwrap().value[i] = orig + step;
            let up = eval(store)?;
            store.get_mut(&name).unwrap().value[i] = orig - step;
            let down = eval(store)?;
            store.get_mut(&name).unwrap().value[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let analytic = store.get(&name).unwrap().grad[i];
            let err = relative_error(analytic, numeric);
            if err > worst.max_rel_error || err.is_nan() {
                worst.max_rel_error = err;
                worst.worst_index = i;
                worst.analytic = analytic;
                worst.numeric = numeric;
            }
        }
        entries.push(worst);
    }
    store.zero_grads();
    Ok(GradCheckReport { tolerance, entries })
}
