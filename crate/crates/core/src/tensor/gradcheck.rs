//! Central finite-difference checks of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::{Graph, ParamStore, Tensor, Var};
use crate::error::Result;

pub const FD_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, floor)`. The floor keeps exact zeros from
/// dividing by zero; it sits well above the FD noise of `1e-10`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    const FLOOR: f64 = 1e-6;
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Checks the gradient w.r.t. input tensors of `f`.
pub fn check_inputs<F>(inputs: &[Tensor], f: F) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let loss = f(&g, &vars)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| {
            grads
                .wrt(*v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |ins: &[Tensor]| -> Result<f64> {
        let g = Graph::inference();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.item())
    };

    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for j in 0..t.len() {
            let orig = t.data()[j];
            work[k].data_mut()[j] = orig + FD_EPS;
            let up = eval(&work)?;
            work[k].data_mut()[j] = orig - FD_EPS;
            let down = eval(&work)?;
            work[k].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(analytic[k][j], numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}

/// Checks parameter gradients of `f`, sampling up to `per_param` coordinates
/// of every parameter whose name starts with `prefix`.
pub fn check_params<F, R>(
    store: &ParamStore,
    prefix: &str,
    per_param: usize,
    rng: &mut R,
    f: F,
) -> Result<GradCheck>
where
    F: for<'g> Fn(&'g Graph, &ParamStore) -> Result<Var<'g>>,
    R: Rng,
{
    let g = Graph::new();
    let loss = f(&g, store)?;
    let grads = g.backward(loss)?;

    let mut work = store.clone();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let ids: Vec<_> = store
        .ids()
        .filter(|&id| store.name(id).starts_with(prefix))
        .collect();
    for id in ids {
        let n = store.value(id).len();
        let picks = sample(rng, n, per_param.min(n));
        for j in picks.iter() {
            let analytic = grads.param(id).map(|g| g[j]).unwrap_or(0.0);
            let orig = store.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + FD_EPS;
            let up = f(&Graph::inference(), &work)?.item();
            work.value_mut(id).data_mut()[j] = orig - FD_EPS;
            let down = f(&Graph::inference(), &work)?.item();
            work.value_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(analytic, numeric));
            checked += 1;
        }
    }
    Ok(GradCheck {
        max_rel_error: worst,
        checked,
    })
}
