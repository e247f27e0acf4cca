//! Routing-entropy and empirical stability diagnostics.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::Result;
use crate::funcpath::FunctionSample;
use crate::model::FameParams;

/// Shannon entropy of one gate vector (natural log, 0 log 0 = 0).
fn entropy(gates: &[f64]) -> f64 {
    gates.iter().filter(|&&p| p > 0.0).map(|&p| -p * p.ln()).sum()
}

/// Normalized routing entropy per channel and pooled: mean over samples of
/// `H(pi) / ln K`, with the K = 1 convention of 0.
pub fn routing_entropy(params: &FameParams, ds: &Dataset) -> Result<(Vec<f64>, f64)> {
    let k = params.config.effective_experts();
    let d = ds.d();
    if k <= 1 || ds.is_empty() {
        return Ok((vec![0.0; d], 0.0));
    }
    let log_k = (k as f64).ln();
    let all: Vec<Vec<Vec<f64>>> = ds
        .samples
        .par_iter()
        .map(|s| params.gates(&s.inputs))
        .collect::<Result<_>>()?;
    let mut per_channel = vec![0.0; d];
    for gates in &all {
        for (j, g) in gates.iter().enumerate() {
            per_channel[j] += entropy(g) / log_k;
        }
    }
    for h in per_channel.iter_mut() {
        *h /= ds.len() as f64;
    }
    let pooled = per_channel.iter().sum::<f64>() / d as f64;
    Ok((per_channel, pooled))
}

/// One row of the perturbation sweep.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub delta: f64,
    /// max over probed samples of ||change in prediction||_inf / delta.
    pub max_ratio: f64,
}

/// Add a triangular bump of 1-variation `delta` at an interior observation
/// of channel 0.
fn bumped(inputs: &[FunctionSample], delta: f64) -> Vec<FunctionSample> {
    let mut out = inputs.to_vec();
    let mid = out[0].len() / 2;
    out[0].values[mid] += delta / 2.0;
    out
}

/// Empirical input-to-output stability: for each perturbation size, the
/// worst observed `||dY||_inf / delta` over the probed samples. The ratios
/// estimate the end-to-end Lipschitz constant; they are reported, not
/// asserted against any specific value.
pub fn estimate_lipschitz(
    params: &FameParams,
    ds: &Dataset,
    deltas: &[f64],
    n_probe: usize,
) -> Result<Vec<LipschitzReport>> {
    let probes: Vec<_> = ds.samples.iter().take(n_probe.max(1)).collect();
    // Dense readout grid for the sup norm.
    let dense: Vec<f64> = (0..65).map(|i| i as f64 / 64.0).collect();
    let queries: Vec<Vec<f64>> = vec![dense; params.config.m];
    let mut reports = Vec::with_capacity(deltas.len());
    for &delta in deltas {
        let ratios: Vec<f64> = probes
            .par_iter()
            .map(|s| -> Result<f64> {
                let base = params.predict(&s.inputs, &queries)?;
                let pert = params.predict(&bumped(&s.inputs, delta), &queries)?;
                let mut sup = 0.0f64;
                for (a, b) in base.iter().zip(&pert) {
                    for (x, y) in a.iter().zip(b) {
                        sup = sup.max((x - y).abs());
                    }
                }
                Ok(sup / delta)
            })
            .collect::<Result<_>>()?;
        let max_ratio = ratios.into_iter().fold(0.0, f64::max);
        reports.push(LipschitzReport { delta, max_ratio });
    }
    Ok(reports)
}
