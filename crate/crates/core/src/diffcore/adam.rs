//! Adam optimizer over the flattened parameter layout.

use serde::{Deserialize, Serialize};

use super::nn::ParamStore;
use crate::error::{FameError, Result};

/// First/second moment state aligned with a [`ParamStore`]'s flat layout.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(n: usize, learning_rate: f64) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }

    /// One bias-corrected update. Gradients must be finite; a non-finite
    /// entry aborts with the name of the offending parameter.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[f64]) -> Result<()> {
        if grads.len() != params.flat_len() {
            return Err(FameError::Dimension {
                context: "adam gradient length",
                expected: params.flat_len(),
                got: grads.len(),
            });
        }
        if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
            return Err(FameError::NonFiniteGradient(params.name_at(bad).to_string()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut flat = 0;
        for i in 0..params.len() {
            let data = params.data_mut(i);
            for x in data.iter_mut() {
                let g = grads[flat];
                let m = &mut self.m[flat];
                let v = &mut self.v[flat];
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
                flat += 1;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(v: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = v.len();
        s.insert("theta", vec![n], v).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut s = store_with(vec![1.0, -2.0, 0.5]);
        let mut adam = AdamState::new(3, 1e-3);
        adam.step(&mut s, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(s.get("theta").unwrap().data, vec![1.0, -2.0, 0.5]);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn single_step_matches_hand_computed_update() {
        // Hand oracle for one bias-corrected step with constant gradient g:
        // m = (1-b1) g, v = (1-b2) g^2, mhat = g, vhat = g^2,
        // delta = -lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 1e-3;
        let mut s = store_with(vec![2.0]);
        let mut adam = AdamState::new(1, lr);
        adam.step(&mut s, &[g]).unwrap();
        let expect = 2.0 - lr * g / (g.abs() + 1e-8);
        let got = s.get("theta").unwrap().data[0];
        assert!((got - expect).abs() < 1e-15, "{got} vs {expect}");
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut s = store_with(vec![0.3, -0.7]);
            let mut adam = AdamState::new(2, 1e-2);
            for k in 0..10 {
                let g = [0.1 * (k as f64 + 1.0), -0.05];
                adam.step(&mut s, &g).unwrap();
            }
            s.get("theta").unwrap().data.clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_aborts_with_name() {
        let mut s = store_with(vec![1.0]);
        let mut adam = AdamState::new(1, 1e-3);
        let err = adam.step(&mut s, &[f64::NAN]).unwrap_err();
        assert!(err.to_string().contains("theta"));
    }
}
