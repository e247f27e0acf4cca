//! Central finite-difference oracle for gradient verification.
//!
//! The oracle only calls the supplied loss function on perturbed parameter
//! copies; it never touches the tape, so it stays independent of the
//! reverse-mode path it is used to check.

use rayon::prelude::*;

use super::nn::ParamStore;

/// Central difference of `loss` with respect to one flat parameter index.
pub fn central_diff<F>(params: &ParamStore, loss: F, flat_idx: usize, h: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let mut p = params.clone();
    p.nudge(flat_idx, h);
    let fp = loss(&p);
    p.nudge(flat_idx, -2.0 * h);
    let fm = loss(&p);
    (fp - fm) / (2.0 * h)
}

/// Outcome of comparing analytic gradients against the finite-difference
/// oracle over a set of flat indices.
#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel: f64,
    /// `(flat index, name, analytic, finite difference)` for failures.
    pub failures: Vec<(usize, String, f64, f64)>,
}

/// Compare `analytic` against central differences at every index in
/// `indices` (all indices when `None`). An entry passes when
/// `|a - fd| <= rtol * max(|a|, |fd|)` or `|a - fd| <= atol`, the absolute
/// floor covering near-zero gradients where the h^2 truncation noise of the
/// oracle dominates.
pub fn check_gradients<F>(
    params: &ParamStore,
    analytic: &[f64],
    loss: F,
    h: f64,
    rtol: f64,
    atol: f64,
    indices: Option<&[usize]>,
) -> GradCheckReport
where
    F: Fn(&ParamStore) -> f64 + Sync,
{
    let all: Vec<usize>;
    let idx: &[usize] = match indices {
        Some(i) => i,
        None => {
            all = (0..params.flat_len()).collect();
            &all
        }
    };
    let results: Vec<(usize, f64, f64)> = idx
        .par_iter()
        .map(|&i| {
            let fd = central_diff(params, &loss, i, h);
            (i, analytic[i], fd)
        })
        .collect();
    let mut max_rel = 0.0f64;
    let mut failures = Vec::new();
    for (i, a, fd) in results {
        let diff = (a - fd).abs();
        let rel = diff / a.abs().max(fd.abs()).max(1e-12);
        if diff > atol {
            max_rel = max_rel.max(rel);
        }
        if diff > rtol * a.abs().max(fd.abs()) && diff > atol {
            failures.push((i, params.name_at(i).to_string(), a, fd));
        }
    }
    GradCheckReport { checked: idx.len(), max_rel, failures }
}
