//! B-spline basis-expansion ridge regression baseline.
//!
//! Each observed function is projected onto a clamped cubic B-spline basis on
//! the normalized domain via ridge-regularized least squares, a closed-form
//! ridge map sends stacked input coefficients to output coefficients, and
//! predicted curves are reconstructed from the mapped coefficients at the
//! test output grids. B-splines are not orthonormal; the standard basis is
//! used as-is.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{FameError, Result};
use crate::funcpath::FunctionSample;

/// Basis size, spline order, and ridge penalty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BasisSpec {
    /// Number of basis functions.
    pub n_basis: usize,
    /// Polynomial degree (3 = cubic).
    pub degree: usize,
    /// Ridge penalty applied to both projection and regression.
    pub ridge: f64,
}

impl Default for BasisSpec {
    fn default() -> Self {
        BasisSpec { n_basis: 8, degree: 3, ridge: 1e-2 }
    }
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_basis < self.degree + 1 {
            return Err(FameError::Config(format!(
                "n_basis {} must be >= order {}",
                self.n_basis,
                self.degree + 1
            )));
        }
        if self.ridge < 0.0 {
            return Err(FameError::Config("ridge penalty must be >= 0".into()));
        }
        Ok(())
    }

    /// Clamped knot vector on [0, 1].
    fn knots(&self) -> Vec<f64> {
        let p = self.degree;
        let interior = self.n_basis - p - 1;
        let mut knots = vec![0.0; p + 1];
        for i in 1..=interior {
            knots.push(i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat(1.0).take(p + 1));
        knots
    }

    /// Evaluate all basis functions at `t` (Cox-de Boor).
    pub fn basis_row(&self, t: f64) -> Vec<f64> {
        let knots = self.knots();
        let p = self.degree;
        let n = self.n_basis;
        let t = t.clamp(0.0, 1.0);
        // Degree-0 seed.
        let mut b = vec![0.0; knots.len() - 1];
        for (i, bi) in b.iter_mut().enumerate() {
            let upper_closed = knots[i + 1] >= 1.0 && t >= 1.0;
            if (knots[i] <= t && t < knots[i + 1]) || (upper_closed && knots[i] < knots[i + 1]) {
                *bi = 1.0;
            }
        }
        for k in 1..=p {
            for i in 0..knots.len() - k - 1 {
                let left = knots[i + k] - knots[i];
                let right = knots[i + k + 1] - knots[i + 1];
                let a = if left > 0.0 { (t - knots[i]) / left * b[i] } else { 0.0 };
                let c = if right > 0.0 { (knots[i + k + 1] - t) / right * b[i + 1] } else { 0.0 };
                b[i] = a + c;
            }
        }
        b.truncate(n);
        b
    }

    /// Design matrix at normalized times.
    pub fn design(&self, times: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(times.len(), self.n_basis, |r, c| self.basis_row(times[r])[c])
    }
}

/// Ridge-regularized least-squares solve `(A^T A + ridge I) x = A^T y`
/// column-wise for a matrix of targets.
fn ridge_solve(a: &DMatrix<f64>, y: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mut normal = a.transpose() * a;
    for i in 0..normal.nrows() {
        normal[(i, i)] += ridge;
    }
    let chol = normal.cholesky().ok_or_else(|| {
        FameError::Singular(
            "normal equations are singular; use a ridge penalty > 0".into(),
        )
    })?;
    Ok(chol.solve(&(a.transpose() * y)))
}

/// Ridge projection of one observed function onto the basis.
pub fn basis_coeffs(sample: &FunctionSample, spec: &BasisSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    let times: Vec<f64> = sample.times.iter().map(|t| t / sample.horizon).collect();
    let a = spec.design(&times);
    let y = DMatrix::from_column_slice(sample.values.len(), 1, &sample.values);
    let c = ridge_solve(&a, &y, spec.ridge)?;
    Ok(c.column(0).iter().copied().collect())
}

/// Closed-form function-on-function ridge regressor over basis coefficients.
#[derive(Clone, Debug)]
pub struct RidgeFofr {
    pub spec: BasisSpec,
    pub d: usize,
    pub m: usize,
    /// (d * n_basis) x (m * n_basis) coefficient map.
    map: DMatrix<f64>,
}

impl RidgeFofr {
    /// Fit the coefficient-to-coefficient ridge map on a training set.
    pub fn fit(train: &Dataset, spec: &BasisSpec) -> Result<RidgeFofr> {
        spec.validate()?;
        if train.is_empty() {
            return Err(FameError::Config("cannot fit baseline on an empty dataset".into()));
        }
        let (d, m) = (train.d(), train.m());
        let nb = spec.n_basis;
        let n = train.len();
        let mut x = DMatrix::zeros(n, d * nb);
        let mut y = DMatrix::zeros(n, m * nb);
        for (i, s) in train.samples.iter().enumerate() {
            if s.inputs.len() != d || s.outputs.len() != m {
                return Err(FameError::Config("inconsistent channel counts across samples".into()));
            }
            for (j, f) in s.inputs.iter().enumerate() {
                for (k, c) in basis_coeffs(f, spec)?.into_iter().enumerate() {
                    x[(i, j * nb + k)] = c;
                }
            }
            for (z, f) in s.outputs.iter().enumerate() {
                for (k, c) in basis_coeffs(f, spec)?.into_iter().enumerate() {
                    y[(i, z * nb + k)] = c;
                }
            }
        }
        let map = ridge_solve(&x, &y, spec.ridge)?;
        Ok(RidgeFofr { spec: spec.clone(), d, m, map })
    }

    /// Predict output curves at each output channel's raw query times.
    pub fn predict(&self, inputs: &[FunctionSample], queries: &[FunctionSample]) -> Result<Vec<Vec<f64>>> {
        if inputs.len() != self.d {
            return Err(FameError::Dimension {
                context: "baseline input channels",
                expected: self.d,
                got: inputs.len(),
            });
        }
        let nb = self.spec.n_basis;
        let mut feat = DVector::zeros(self.d * nb);
        for (j, f) in inputs.iter().enumerate() {
            for (k, c) in basis_coeffs(f, &self.spec)?.into_iter().enumerate() {
                feat[j * nb + k] = c;
            }
        }
        let coefs = self.map.transpose() * feat;
        queries
            .iter()
            .enumerate()
            .map(|(z, q)| {
                let times: Vec<f64> = q.times.iter().map(|t| t / q.horizon).collect();
                let design = self.spec.design(&times);
                Ok((0..times.len())
                    .map(|r| {
                        (0..nb).map(|k| design[(r, k)] * coefs[z * nb + k]).sum::<f64>()
                    })
                    .collect())
            })
            .collect()
    }

    /// Test MSE with the same convention as the model: per-sample mean over
    /// points and channels, then mean over samples.
    pub fn mse(&self, test: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for s in &test.samples {
            let preds = self.predict(&s.inputs, &s.outputs)?;
            let mut se = 0.0;
            let mut count = 0;
            for (pred, truth) in preds.iter().zip(&s.outputs) {
                for (p, y) in pred.iter().zip(&truth.values) {
                    se += (p - y) * (p - y);
                    count += 1;
                }
            }
            total += se / count as f64;
        }
        Ok(total / test.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_case, GenSpec, Provenance, SamplePair};

    fn uniform_sample(n: usize, f: impl Fn(f64) -> f64) -> FunctionSample {
        let times: Vec<f64> = (0..n).map(|k| k as f64 / (n - 1) as f64).collect();
        let values = times.iter().map(|&t| f(t)).collect();
        FunctionSample::new(times, values, 1.0).unwrap()
    }

    #[test]
    fn partition_of_unity_reconstructs_constants() {
        let spec = BasisSpec::default();
        for k in 0..=50 {
            let t = k as f64 / 50.0;
            let row = spec.basis_row(t);
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "partition of unity at {t}: {sum}");
        }
        // Projection of a constant reconstructs it (ridge pulls it slightly,
        // hence the 1e-9 scale check at a small penalty).
        let c = 2.4;
        let sample = uniform_sample(40, |_| c);
        let tight = BasisSpec { ridge: 1e-10, ..BasisSpec::default() };
        let coefs = basis_coeffs(&sample, &tight).unwrap();
        for k in 0..=20 {
            let t = k as f64 / 20.0;
            let row = tight.basis_row(t);
            let v: f64 = row.iter().zip(&coefs).map(|(a, b)| a * b).sum();
            assert!((v - c).abs() < 1e-9, "constant reconstruction {v} vs {c}");
        }
    }

    #[test]
    fn zero_observations_give_zero_coefficients() {
        let sample = uniform_sample(25, |_| 0.0);
        let coefs = basis_coeffs(&sample, &BasisSpec::default()).unwrap();
        assert!(coefs.iter().all(|c| c.abs() < 1e-14));
    }

    #[test]
    fn reconstruction_improves_with_basis_size() {
        // Nested-basis oracle: projection error decreases as n_basis grows.
        let f = |t: f64| (3.0 * std::f64::consts::PI * t).sin() + 0.5 * t;
        let sample = uniform_sample(60, f);
        let mut prev = f64::INFINITY;
        for nb in [4usize, 8, 16] {
            let spec = BasisSpec { n_basis: nb, ridge: 1e-8, ..BasisSpec::default() };
            let coefs = basis_coeffs(&sample, &spec).unwrap();
            let err: f64 = (0..=120)
                .map(|k| {
                    let t = k as f64 / 120.0;
                    let v: f64 =
                        spec.basis_row(t).iter().zip(&coefs).map(|(a, b)| a * b).sum();
                    (v - f(t)).powi(2)
                })
                .sum::<f64>()
                / 121.0;
            assert!(err < prev, "n_basis {nb}: error {err} did not shrink from {prev}");
            prev = err;
        }
    }

    #[test]
    fn singular_without_ridge_advises_penalty() {
        // 3 observations cannot pin down 8 basis functions at ridge 0.
        let sample = uniform_sample(3, |t| t);
        let spec = BasisSpec { ridge: 0.0, ..BasisSpec::default() };
        match basis_coeffs(&sample, &spec) {
            Err(FameError::Singular(msg)) => assert!(msg.contains("ridge")),
            other => panic!("expected singular error, got {other:?}"),
        }
    }

    fn identity_dataset(n: usize) -> Dataset {
        // Output equals the first input channel.
        let samples: Vec<SamplePair> = (0..n)
            .map(|i| {
                let phase = i as f64 * 0.37;
                let f = move |t: f64| (2.0 * std::f64::consts::PI * t + phase).sin();
                let a = uniform_sample(30, f);
                SamplePair {
                    inputs: vec![a.clone(), uniform_sample(30, move |t| (t + phase).cos())],
                    outputs: vec![a],
                }
            })
            .collect();
        Dataset {
            samples,
            provenance: Provenance::File("synthetic-identity".into()),
        }
    }

    #[test]
    fn identity_task_reaches_small_mse() {
        let ds = identity_dataset(60);
        let spec = BasisSpec { n_basis: 12, ridge: 1e-6, ..BasisSpec::default() };
        let model = RidgeFofr::fit(&ds, &spec).unwrap();
        let mse = model.mse(&ds).unwrap();
        assert!(mse < 1e-3, "identity-task mse {mse}");
    }

    #[test]
    fn zero_targets_shrink_to_zero_predictions() {
        let mut ds = identity_dataset(20);
        for s in ds.samples.iter_mut() {
            for o in s.outputs.iter_mut() {
                o.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let model = RidgeFofr::fit(&ds, &BasisSpec::default()).unwrap();
        let preds = model.predict(&ds.samples[0].inputs, &ds.samples[0].outputs).unwrap();
        assert!(preds[0].iter().all(|p| p.abs() < 1e-10));
    }

    #[test]
    fn training_residual_nondecreasing_in_ridge() {
        let ds = make_case(&GenSpec::for_case(1, 40, 77).unwrap()).unwrap();
        let mut prev = -1.0;
        for ridge in [1e-6, 1e-3, 1e-1, 1.0, 10.0] {
            let spec = BasisSpec { ridge, ..BasisSpec::default() };
            let model = RidgeFofr::fit(&ds, &spec).unwrap();
            let mse = model.mse(&ds).unwrap();
            assert!(mse >= prev - 1e-12, "ridge {ridge}: train mse {mse} < {prev}");
            prev = mse;
        }
    }

    #[test]
    fn closed_form_fit_is_deterministic() {
        let ds = make_case(&GenSpec::for_case(1, 20, 99).unwrap()).unwrap();
        let a = RidgeFofr::fit(&ds, &BasisSpec::default()).unwrap();
        let b = RidgeFofr::fit(&ds, &BasisSpec::default()).unwrap();
        assert_eq!(a.mse(&ds).unwrap(), b.mse(&ds).unwrap());
    }
}
