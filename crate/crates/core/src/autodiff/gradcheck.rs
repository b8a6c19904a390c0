use serde::Serialize;

use super::graph::{Graph, Var};
use super::params::{ParamBinding, ParamStore};
use crate::error::Result;

/// Gradient magnitudes below this are compared on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub blocks: Vec<BlockReport>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.blocks.iter().all(|b| b.passed)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.blocks.iter().map(|b| b.max_rel_err).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares reverse-mode gradients of `loss` against central differences,
/// one block per parameter tensor of `store`.
pub fn finite_difference_check<F>(
    loss: F,
    store: &ParamStore,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamBinding) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let p = g.bind(s);
        let root = loss(&mut g, &p)?;
        g.scalar(root)
    };

    let mut g = Graph::new();
    let binding = g.bind(store);
    let root = loss(&mut g, &binding)?;
    let grads = g.backward(root)?.params(&g, &binding);

    let mut work = store.clone();
    let mut blocks = Vec::with_capacity(store.len());
    for (id, name, t) in store.iter() {
        let mut max_rel: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for k in 0..t.len() {
            let orig = t.data()[k];
            work.get_mut(id).data_mut()[k] = orig + step;
            let up = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig - step;
            let down = eval(&work)?;
            work.get_mut(id).data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = grads.get(id).data()[k];
            max_rel = max_rel.max(relative_error(analytic, numeric));
            max_abs = max_abs.max((analytic - numeric).abs());
        }
        blocks.push(BlockReport {
            name: name.to_string(),
            entries: t.len(),
            max_rel_err: max_rel,
            max_abs_err: max_abs,
            passed: max_rel < tolerance,
        });
    }
    Ok(GradCheckReport { step, tolerance, blocks })
}
