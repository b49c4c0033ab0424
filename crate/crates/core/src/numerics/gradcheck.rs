//! Central finite-difference verification of analytic gradients in `f64`.

use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

use crate::error::Result;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckTolerance {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    /// Fraction of probed coordinates that must meet `rel_tol`.
    pub min_rel_fraction: f64,
    /// Relative errors are measured against `max(|a|, |n|, rel_floor)`.
    pub rel_floor: f64,
}

impl Default for GradCheckTolerance {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rel_tol: 1e-3,
            abs_tol: 1e-4,
            min_rel_fraction: 0.99,
            rel_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub name: String,
    pub probed: usize,
    pub rel_ok: usize,
    pub max_rel_err: f64,
    /// Largest absolute error among coordinates that missed `rel_tol`.
    pub max_abs_err_rest: f64,
    pub passed: bool,
}

/// A parameter coordinate: `(tensor index, flat element index)`.
pub type Probe = (usize, usize);

/// Every coordinate of every tensor when the total is at most `limit`,
/// otherwise a uniform random subset of that size.
pub fn choose_probes<R: Rng>(params: &[Tensor<f64>], limit: usize, rng: &mut R) -> Vec<Probe> {
    let all: Vec<Probe> = params
        .iter()
        .enumerate()
        .flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i)))
        .collect();
    if all.len() <= limit {
        return all;
    }
    let mut picked: Vec<usize> = sample(rng, all.len(), limit).into_vec();
    picked.sort_unstable();
    picked.into_iter().map(|i| all[i]).collect()
}

/// Like [`choose_probes`] but guarantees `per_tensor` coordinates from every tensor.
pub fn choose_probes_per_tensor<R: Rng>(
    params: &[Tensor<f64>],
    per_tensor: usize,
    rng: &mut R,
) -> Vec<Probe> {
    let mut probes = Vec::new();
    for (t, p) in params.iter().enumerate() {
        let n = p.len().min(per_tensor);
        let mut idx = sample(rng, p.len(), n).into_vec();
        idx.sort_unstable();
        probes.extend(idx.into_iter().map(|i| (t, i)));
    }
    probes
}

/// Compares the tape gradient of `loss_fn` against central differences.
///
/// `loss_fn` receives a fresh graph with `params` registered as leaves (in
/// order) and must return a scalar node.
pub fn check_gradients<F>(
    name: &str,
    params: &[Tensor<f64>],
    probes: &[Probe],
    tol: &GradCheckTolerance,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
    let loss = loss_fn(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = probes
        .iter()
        .map(|&(t, i)| g.grad(vars[t]).map_or(0.0, |gr| gr[i]))
        .collect();
    drop(g);

    let eval = |params: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p)).collect();
        let loss = loss_fn(&mut g, &vars)?;
        Ok(g.scalar_value(loss))
    };

    let mut work = params.to_vec();
    let mut rel_ok = 0;
    let mut max_rel: f64 = 0.0;
    let mut max_abs_rest: f64 = 0.0;
    for (&(t, i), &a) in probes.iter().zip(&analytic) {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + tol.step;
        let up = eval(&work)?;
        work[t].data_mut()[i] = orig - tol.step;
        let down = eval(&work)?;
        work[t].data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * tol.step);
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(tol.rel_floor);
        max_rel = max_rel.max(rel);
        if rel < tol.rel_tol {
            rel_ok += 1;
        } else {
            max_abs_rest = max_abs_rest.max(abs);
        }
    }
    let probed = probes.len();
    let passed = probed > 0
        && rel_ok as f64 >= tol.min_rel_fraction * probed as f64
        && max_abs_rest < tol.abs_tol;
    Ok(GradCheckReport {
        name: name.to_string(),
        probed,
        rel_ok,
        max_rel_err: max_rel,
        max_abs_err_rest: max_abs_rest,
        passed,
    })
}
