//! Parameter storage, MLP specs, and the stable softmax.

use std::collections::HashMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{softmax_kernel, Tape, Var};
use crate::error::{FameError, Result};

/// A named parameter array with shape metadata, row-major.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Ordered map of named parameter arrays. Insertion order defines the
/// flattened layout used by the optimizer and by gradient checks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    #[serde(skip)]
    offsets: Vec<usize>,
    #[serde(skip)]
    total: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) -> Result<usize> {
        if self.index.contains_key(name) {
            return Err(FameError::Config(format!("duplicate parameter name '{name}'")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(FameError::Dimension {
                context: "ParamStore insert",
                expected: numel,
                got: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(FameError::Config(format!("non-finite init for '{name}'")));
        }
        let idx = self.entries.len();
        self.index.insert(name.to_string(), idx);
        self.offsets.push(self.total);
        self.total += numel;
        self.entries.push((name.to_string(), Tensor { shape, data }));
        Ok(idx)
    }

    /// Rebuild the derived index after deserialization.
    pub fn reindex(&mut self) {
        self.index.clear();
        self.offsets.clear();
        self.total = 0;
        for (i, (name, t)) in self.entries.iter().enumerate() {
            self.index.insert(name.clone(), i);
            self.offsets.push(self.total);
            self.total += t.numel();
        }
    }

    pub fn idx(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.idx(name).map(|i| &self.entries[i].1)
    }

    pub fn entry(&self, i: usize) -> (&str, &Tensor) {
        let (n, t) = &self.entries[i];
        (n, t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn flat_len(&self) -> usize {
        self.total
    }

    /// Flat offset of entry `i`.
    pub fn offset(&self, i: usize) -> usize {
        self.offsets[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Locate `(entry, within)` for a flat scalar index.
    pub fn locate(&self, flat: usize) -> (usize, usize) {
        debug_assert!(flat < self.total);
        let i = match self.offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        (i, flat - self.offsets[i])
    }

    /// Parameter name owning a flat scalar index.
    pub fn name_at(&self, flat: usize) -> &str {
        let (i, _) = self.locate(flat);
        &self.entries[i].0
    }

    /// Add `delta` to one scalar, addressed by flat index.
    pub fn nudge(&mut self, flat: usize, delta: f64) {
        let (i, j) = self.locate(flat);
        self.entries[i].1.data[j] += delta;
    }

    pub fn data_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.entries[i].1.data
    }

    /// Bind every parameter as a leaf on `tape`, in store order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.entries.iter().map(|(_, t)| tape.leaf(t.data.clone())).collect()
    }

    /// Collect leaf gradients into one flat vector aligned with the store.
    pub fn flatten_grads(&self, vars: &[Var], grads: &super::tape::Grads) -> Vec<f64> {
        let mut out = vec![0.0; self.total];
        for (i, (_, t)) in self.entries.iter().enumerate() {
            if let Some(g) = grads.get(vars[i]) {
                out[self.offsets[i]..self.offsets[i] + t.numel()].copy_from_slice(g);
            }
        }
        out
    }
}

/// Shape of a small MLP: `input -> hidden.. -> output`, tanh after each
/// hidden layer, linear output, inverted dropout on hidden activations
/// during training.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    pub dropout: f64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize, dropout: f64) -> Result<Self> {
        if input == 0 || output == 0 || hidden.iter().any(|&h| h == 0) {
            return Err(FameError::Config("MLP dims must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(FameError::Config(format!("dropout {dropout} outside [0, 1)")));
        }
        Ok(Self { input, hidden, output, dropout })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = Vec::with_capacity(self.hidden.len() + 2);
        d.push(self.input);
        d.extend_from_slice(&self.hidden);
        d.push(self.output);
        d
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Insert Glorot-initialized layer parameters under `prefix.w{l}` /
    /// `prefix.b{l}`.
    pub fn init_into(&self, store: &mut ParamStore, prefix: &str, rng: &mut impl Rng) -> Result<()> {
        let dims = self.dims();
        for l in 0..self.n_layers() {
            let (rows, cols) = (dims[l + 1], dims[l]);
            store.insert(
                &format!("{prefix}.w{l}"),
                vec![rows, cols],
                glorot_uniform(rows, cols, rng),
            )?;
            store.insert(&format!("{prefix}.b{l}"), vec![rows], vec![0.0; rows])?;
        }
        Ok(())
    }

    /// Look up the bound tape vars for this MLP's layers.
    pub fn bind<'a>(&self, store: &ParamStore, vars: &'a [Var], prefix: &str) -> Vec<(Var, Var)> {
        (0..self.n_layers())
            .map(|l| {
                let w = store.idx(&format!("{prefix}.w{l}")).expect("missing mlp weight");
                let b = store.idx(&format!("{prefix}.b{l}")).expect("missing mlp bias");
                (vars[w], vars[b])
            })
            .collect()
    }

    /// Fresh inverted-dropout masks for each hidden layer.
    pub fn masks(&self, rng: &mut impl Rng) -> Vec<Rc<Vec<f64>>> {
        let keep = 1.0 - self.dropout;
        self.hidden
            .iter()
            .map(|&h| {
                Rc::new(
                    (0..h)
                        .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect::<Vec<f64>>(),
                )
            })
            .collect()
    }
}

/// Glorot/Xavier uniform init: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Vec<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| rng.gen::<f64>() * 2.0 * a - a).collect()
}

/// Evaluate an MLP outside any training pass. This drives the same fused
/// kernel the model records on its tape.
pub fn mlp_eval(
    spec: &MlpSpec,
    layers: &[(&[f64], &[f64])],
    x: &[f64],
    training: bool,
    rng: Option<&mut dyn rand::RngCore>,
) -> Result<Vec<f64>> {
    if x.len() != spec.input {
        return Err(FameError::Dimension {
            context: "mlp_eval input",
            expected: spec.input,
            got: x.len(),
        });
    }
    let dims = spec.dims();
    if layers.len() != spec.n_layers() {
        return Err(FameError::Dimension {
            context: "mlp_eval layers",
            expected: spec.n_layers(),
            got: layers.len(),
        });
    }
    for (l, (w, b)) in layers.iter().enumerate() {
        if w.len() != dims[l + 1] * dims[l] || b.len() != dims[l + 1] {
            return Err(FameError::Dimension {
                context: "mlp_eval layer shape",
                expected: dims[l + 1] * dims[l],
                got: w.len(),
            });
        }
    }
    let mut tape = Tape::new();
    let xv = tape.leaf(x.to_vec());
    let lvars: Vec<(Var, Var)> = layers
        .iter()
        .map(|(w, b)| (tape.leaf(w.to_vec()), tape.leaf(b.to_vec())))
        .collect();
    let masks = if training && spec.dropout > 0.0 {
        let rng = rng.ok_or_else(|| FameError::Config("training mlp_eval needs an rng".into()))?;
        Some(
            spec.hidden
                .iter()
                .map(|&h| {
                    let keep = 1.0 - spec.dropout;
                    Rc::new(
                        (0..h)
                            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect::<Vec<f64>>(),
                    )
                })
                .collect::<Vec<_>>(),
        )
    } else {
        None
    };
    let y = tape.mlp(&lvars, &dims, xv, masks.as_deref());
    Ok(tape.val(y).to_vec())
}

/// Result of a stable softmax evaluation.
#[derive(Clone, Debug)]
pub struct SoftmaxOut {
    pub weights: Vec<f64>,
    /// Set when the requested temperature was below the floor and clamped.
    pub clamped_to: Option<f64>,
}

/// Default temperature floor used when a config does not override it.
pub const DEFAULT_TEMP_FLOOR: f64 = 0.1;

/// Log-sum-exp stabilized softmax with a temperature floor. A temperature
/// below `floor` is clamped and reported in the result rather than silently
/// accepted.
pub fn softmax_stable(logits: &[f64], temperature: f64, floor: f64) -> SoftmaxOut {
    let (temp, clamped) = if temperature < floor { (floor, true) } else { (temperature, false) };
    let mut weights = vec![0.0; logits.len()];
    softmax_kernel(logits, temp, &mut weights);
    SoftmaxOut { weights, clamped_to: clamped.then_some(temp) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn store_layout_and_lookup() {
        let mut s = ParamStore::new();
        s.insert("a", vec![2, 3], vec![0.0; 6]).unwrap();
        s.insert("b", vec![4], vec![1.0; 4]).unwrap();
        assert_eq!(s.flat_len(), 10);
        assert_eq!(s.name_at(0), "a");
        assert_eq!(s.name_at(7), "b");
        assert!(s.insert("a", vec![1], vec![0.0]).is_err());
        assert!(s.insert("c", vec![2], vec![0.0]).is_err());
        s.nudge(8, 0.5);
        assert_eq!(s.get("b").unwrap().data, vec![1.0, 1.0, 1.5, 1.0]);
    }

    #[test]
    fn mlp_zero_params_gives_zero_output() {
        let spec = MlpSpec::new(3, vec![4, 5], 2, 0.0).unwrap();
        let w1 = vec![0.0; 12];
        let b1 = vec![0.0; 4];
        let w2 = vec![0.0; 20];
        let b2 = vec![0.0; 5];
        let w3 = vec![0.0; 10];
        let b3 = vec![0.0; 2];
        let y = mlp_eval(
            &spec,
            &[(&w1, &b1), (&w2, &b2), (&w3, &b3)],
            &[1.0, -2.0, 0.5],
            false,
            None,
        )
        .unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_identity_like_chain_through_zero() {
        // 1 -> 1 net with unit weights and zero biases: tanh(0) = 0 at x = 0.
        let spec = MlpSpec::new(1, vec![1, 1], 1, 0.0).unwrap();
        let one = vec![1.0];
        let zero = vec![0.0];
        let y = mlp_eval(
            &spec,
            &[(&one, &zero), (&one, &zero), (&one, &zero)],
            &[0.0],
            false,
            None,
        )
        .unwrap();
        assert_eq!(y, vec![0.0]);
    }

    #[test]
    fn mlp_matches_straight_line_oracle() {
        // Independent oracle: explicit loops over the same arithmetic.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let spec = MlpSpec::new(4, vec![5, 6], 3, 0.0).unwrap();
        let dims = spec.dims();
        let mut layers_data = Vec::new();
        for l in 0..3 {
            layers_data.push((
                glorot_uniform(dims[l + 1], dims[l], &mut rng),
                (0..dims[l + 1]).map(|_| rng.gen::<f64>() - 0.5).collect::<Vec<f64>>(),
            ));
        }
        let x: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();

        let oracle = {
            let mut cur = x.clone();
            for l in 0..3 {
                let (w, b) = &layers_data[l];
                let (rows, cols) = (dims[l + 1], dims[l]);
                let mut next = vec![0.0; rows];
                for r in 0..rows {
                    let mut acc = b[r];
                    for c in 0..cols {
                        acc += w[r * cols + c] * cur[c];
                    }
                    next[r] = if l < 2 { acc.tanh() } else { acc };
                }
                cur = next;
            }
            cur
        };
        let refs: Vec<(&[f64], &[f64])> =
            layers_data.iter().map(|(w, b)| (w.as_slice(), b.as_slice())).collect();
        let y = mlp_eval(&spec, &refs, &x, false, None).unwrap();
        for (a, b) in y.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_overflow() {
        let out = softmax_stable(&[2.0, 2.0, 2.0, 2.0], 1.0, 0.1);
        for w in &out.weights {
            assert!((w - 0.25).abs() < 1e-15);
        }
        assert!(out.clamped_to.is_none());

        let big = softmax_stable(&[1000.0, 0.0], 1.0, 0.1);
        assert!(big.weights[0] > 0.999999 && big.weights.iter().all(|w| w.is_finite()));
        let s: f64 = big.weights.iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_naive_oracle_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let logits: Vec<f64> = (0..5).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let out = softmax_stable(&logits, 1.0, 0.1);
            let exps: Vec<f64> = logits.iter().map(|l| l.exp()).collect();
            let z: f64 = exps.iter().sum();
            for (w, e) in out.weights.iter().zip(&exps) {
                assert!((w - e / z).abs() < 1e-12);
            }
            let sum: f64 = out.weights.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(out.weights.iter().all(|&w| w > 0.0 && w <= 1.0));
        }
        let clamped = softmax_stable(&[1.0, 2.0], 0.01, 0.1);
        assert_eq!(clamped.clamped_to, Some(0.1));
    }

    proptest::proptest! {
        #[test]
        fn softmax_simplex(logits in proptest::collection::vec(-50.0f64..50.0, 1..8)) {
            let out = softmax_stable(&logits, 1.0, 0.1);
            let sum: f64 = out.weights.iter().sum();
            proptest::prop_assert!((sum - 1.0).abs() < 1e-12);
            proptest::prop_assert!(out.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        }
    }
}
