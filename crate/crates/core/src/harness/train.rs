//! Batch training loop with seeded shuffling and parallel per-sample
//! gradients reduced in deterministic order.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset, SamplePair};
use crate::diffcore::AdamState;
use crate::error::{FameError, Result};
use crate::funcpath::FunctionSample;
use crate::model::{loss_and_grad, FameParams, ModelConfig};

/// Everything a training run needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Paper-default training settings for `d` inputs and `m` outputs.
    pub fn new(d: usize, m: usize) -> Self {
        TrainConfig {
            epochs: 100,
            learning_rate: 1e-3,
            batch_size: 4,
            seed: 0,
            split_ratio: 0.8,
            model: ModelConfig::new(d, m),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(FameError::Config("batch_size must be positive".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(FameError::Config("split_ratio must lie in (0, 1)".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(FameError::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// Summary of one training run.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// MSE on the held-out set at the sample's observed output instants.
    pub test_mse: f64,
    /// Normalized routing entropy per input channel (eval set).
    pub entropy_per_channel: Vec<f64>,
    pub entropy_pooled: f64,
    /// Measured cross-attention operator norms at the end of training.
    pub cross_norms: Vec<(String, f64)>,
    pub wall_clock_s: f64,
}

/// Trained parameters, metrics, and whether the run was cut short.
pub struct TrainResult {
    pub params: FameParams,
    pub metrics: Metrics,
    /// Epoch at which training diverged; params are the last finite state.
    pub diverged_at: Option<usize>,
}

/// Mean over samples of the mean squared residual over each sample's output
/// points and channels.
pub fn mse_loss(predicted: &[Vec<Vec<f64>>], observed: &[&[FunctionSample]]) -> Result<f64> {
    if predicted.len() != observed.len() {
        return Err(FameError::Dimension {
            context: "mse_loss samples",
            expected: observed.len(),
            got: predicted.len(),
        });
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (pred, obs) in predicted.iter().zip(observed) {
        let mut se = 0.0;
        let mut count = 0usize;
        if pred.len() != obs.len() {
            return Err(FameError::Dimension {
                context: "mse_loss channels",
                expected: obs.len(),
                got: pred.len(),
            });
        }
        for (p, o) in pred.iter().zip(*obs) {
            if p.len() != o.values.len() {
                return Err(FameError::Dimension {
                    context: "mse_loss points",
                    expected: o.values.len(),
                    got: p.len(),
                });
            }
            for (a, b) in p.iter().zip(&o.values) {
                se += (a - b) * (a - b);
                count += 1;
            }
        }
        total += se / count as f64;
    }
    Ok(total / predicted.len() as f64)
}

/// Normalized output instants for each output channel of a sample.
pub fn normalized_queries(s: &SamplePair) -> Vec<Vec<f64>> {
    s.outputs
        .iter()
        .map(|o| o.times.iter().map(|t| t / o.horizon).collect())
        .collect()
}

fn targets_of(s: &SamplePair) -> Vec<Vec<f64>> {
    s.outputs.iter().map(|o| o.values.clone()).collect()
}

/// Evaluation MSE of a model over a dataset.
pub fn eval_mse(params: &FameParams, ds: &Dataset) -> Result<f64> {
    let preds: Vec<Vec<Vec<f64>>> = ds
        .samples
        .par_iter()
        .map(|s| params.predict(&s.inputs, &normalized_queries(s)))
        .collect::<Result<_>>()?;
    let observed: Vec<&[FunctionSample]> = ds.samples.iter().map(|s| s.outputs.as_slice()).collect();
    mse_loss(&preds, &observed)
}

fn mask_seed(seed: u64, epoch: usize, sample: usize) -> u64 {
    // SplitMix64-style mixing for decorrelated per-(epoch, sample) streams.
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E3779B97F4A7C15) ^ (sample as u64).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Split the dataset per the config, then train.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<TrainResult> {
    let (tr, te) = split(dataset, config.split_ratio, config.seed)?;
    train_on(config, &tr, &te)
}

/// Train on an explicit train set, evaluating on `eval` at the end. The
/// model's channel counts are taken from the data.
pub fn train_on(config: &TrainConfig, train_set: &Dataset, eval: &Dataset) -> Result<TrainResult> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(FameError::Config("empty training set".into()));
    }
    let start = std::time::Instant::now();
    let mut model_cfg = config.model.clone();
    model_cfg.d = train_set.d();
    model_cfg.m = train_set.m();
    let mut params = FameParams::init(model_cfg, config.seed)?;
    let specs = params.specs();
    let mut adam = AdamState::new(params.store.flat_len(), config.learning_rate);
    let n = train_set.len();
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_good = params.clone();
    let mut diverged_at = None;

    'epochs: for epoch in 0..config.epochs {
        // Cosine decay from the initial learning rate.
        adam.learning_rate = config.learning_rate
            * 0.5
            * (1.0 + (std::f64::consts::PI * epoch as f64 / config.epochs as f64).cos());
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(10_000 + epoch as u64);
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let results: Vec<Result<(f64, Vec<f64>)>> = batch
                .par_iter()
                .map(|&i| {
                    let s = &train_set.samples[i];
                    loss_and_grad(
                        &params,
                        &specs,
                        &s.inputs,
                        &normalized_queries(s),
                        &targets_of(s),
                        mask_seed(config.seed, epoch, i),
                        true,
                    )
                })
                .collect();
            let mut batch_loss = 0.0;
            let mut grad = vec![0.0; params.store.flat_len()];
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, g) = r?;
                if !loss.is_finite() {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                batch_loss += loss * scale;
                for (acc, gi) in grad.iter_mut().zip(&g) {
                    *acc += gi * scale;
                }
            }
            match adam.step(&mut params.store, &grad) {
                Ok(()) => {}
                Err(FameError::NonFiniteGradient(_)) => {
                    diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            epoch_loss += batch_loss * batch.len() as f64;
        }
        history.push(epoch_loss / n as f64);
        last_good = params.clone();
    }

    let final_params = if diverged_at.is_some() { last_good } else { params };
    let test_mse = if eval.is_empty() { f64::NAN } else { eval_mse(&final_params, eval)? };
    let (entropy_per_channel, entropy_pooled) = if eval.is_empty() {
        (Vec::new(), 0.0)
    } else {
        super::diagnostics::routing_entropy(&final_params, eval)?
    };
    let metrics = Metrics {
        train_loss: history,
        test_mse,
        entropy_per_channel,
        entropy_pooled,
        cross_norms: final_params.cross_norms(),
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    Ok(TrainResult { params: final_params, metrics, diverged_at })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_case, GenSpec};

    fn tiny_config() -> TrainConfig {
        let mut cfg = TrainConfig::new(3, 1);
        cfg.epochs = 2;
        cfg.batch_size = 4;
        cfg.model.h = 3;
        cfg.model.d_f = 4;
        cfg.model.d_c = 2;
        cfg.model.heads = 2;
        cfg.model.experts = 2;
        cfg.model.summary_dim = 3;
        cfg.model.mlp_hidden = vec![4, 5];
        cfg.model.grid_q = 8;
        cfg
    }

    #[test]
    fn mse_loss_trivial_and_oracle() {
        let f = FunctionSample::new(vec![0.0, 0.5, 1.0], vec![1.0, 2.0, 3.0], 1.0).unwrap();
        let obs: Vec<&[FunctionSample]> = vec![std::slice::from_ref(&f)];
        // Exact predictions give zero.
        assert_eq!(mse_loss(&[vec![vec![1.0, 2.0, 3.0]]], &obs).unwrap(), 0.0);
        // Constant offset delta gives delta^2.
        let shifted = mse_loss(&[vec![vec![1.3, 2.3, 3.3]]], &obs).unwrap();
        assert!((shifted - 0.09).abs() < 1e-12);

        // Random residuals against a flat double-loop oracle.
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut preds = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..4 {
            let truth: Vec<f64> = (0..5).map(|_| rng.gen::<f64>()).collect();
            let times: Vec<f64> = (0..5).map(|k| k as f64 / 4.0).collect();
            samples.push(vec![FunctionSample::new(times, truth, 1.0).unwrap()]);
            preds.push(vec![(0..5).map(|_| rng.gen::<f64>()).collect::<Vec<f64>>()]);
        }
        let obs: Vec<&[FunctionSample]> = samples.iter().map(|s| s.as_slice()).collect();
        let got = mse_loss(&preds, &obs).unwrap();
        let mut oracle = 0.0;
        for (p, s) in preds.iter().zip(&samples) {
            let mut se = 0.0;
            for (a, b) in p[0].iter().zip(&s[0].values) {
                se += (a - b) * (a - b);
            }
            oracle += se / 5.0;
        }
        oracle /= 4.0;
        assert!((got - oracle).abs() < 1e-12);
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let ds = make_case(&GenSpec::for_case(1, 10, 3).unwrap()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 0;
        let out = train(&cfg, &ds).unwrap();
        assert!(out.metrics.train_loss.is_empty());
        assert!(out.diverged_at.is_none());
        let fresh = FameParams::init(out.params.config.clone(), cfg.seed).unwrap();
        for ((_, a), (_, b)) in out.params.store.iter().zip(fresh.store.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn training_is_deterministic_and_loss_drops() {
        let ds = make_case(&GenSpec::for_case(1, 12, 5).unwrap()).unwrap();
        let mut cfg = tiny_config();
        cfg.epochs = 5;
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.metrics.train_loss, b.metrics.train_loss);
        assert_eq!(a.metrics.test_mse, b.metrics.test_mse);
        assert!(
            a.metrics.train_loss.last().unwrap() < a.metrics.train_loss.first().unwrap(),
            "loss history {:?}",
            a.metrics.train_loss
        );
    }
}
