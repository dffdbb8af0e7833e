//! Named parameter store, gradient accumulation and the Adam optimizer.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::GrcError;
use crate::rng::next_gaussian;
use crate::tensor::TensorData;
use crate::Result;

/// Ordered collection of named parameter tensors.
///
/// Iteration always follows insertion order, which is fixed by model
/// construction, so gradient application and checkpoints are deterministic.
#[derive(Debug, Clone, Default)]
pub struct Parameters {
    order: Vec<String>,
    map: HashMap<String, TensorData>,
}

impl Parameters {
    pub fn new() -> Self {
        Parameters::default()
    }

    pub fn insert(&mut self, name: &str, tensor: TensorData) {
        assert!(!self.map.contains_key(name), "duplicate parameter name {name}");
        self.order.push(name.to_string());
        self.map.insert(name.to_string(), tensor);
    }

    /// Registers a parameter with Gaussian init of the given std.
    pub fn insert_gaussian(&mut self, name: &str, shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| next_gaussian(rng) * std).collect();
        self.insert(name, TensorData::new(shape, data));
    }

    /// Registers a parameter filled with a constant.
    pub fn insert_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, TensorData::new(shape, vec![value; n]));
    }

    pub fn get(&self, name: &str) -> &TensorData {
        self.map.get(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut TensorData {
        self.map.get_mut(name).unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// True when every tensor matches bit for bit.
    pub fn bit_identical(&self, other: &Parameters) -> bool {
        if self.order != other.order {
            return false;
        }
        self.order.iter().all(|name| {
            let a = &self.map[name];
            let b = &other.map[name];
            a.shape == b.shape
                && a.data.len() == b.data.len()
                && a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits())
        })
    }
}

/// Gradients accumulated by name across one or more backward passes.
#[derive(Debug, Default)]
pub struct GradStore {
    map: HashMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn accumulate(&mut self, name: &str, grad: &[f64]) {
        let slot = self.map.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
        assert_eq!(slot.len(), grad.len(), "gradient length changed for {name}");
        for (s, g) in slot.iter_mut().zip(grad) {
            *s += g;
        }
    }

    /// Scales every stored gradient, e.g. to average over a batch.
    pub fn scale(&mut self, c: f64) {
        for g in self.map.values_mut() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(|v| v.as_slice())
    }

    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Adam state: per-parameter moment accumulators plus the step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first_moment: BTreeMap<String, Vec<f64>>,
    second_moment: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One Adam update over every parameter that has a gradient.
    ///
    /// If any gradient is non-finite the step is aborted before touching the
    /// parameters or moments, and an error identifies the parameter.
    pub fn step(&mut self, params: &mut Parameters, grads: &GradStore) -> Result<()> {
        for name in params.order.clone() {
            if let Some(g) = grads.get(&name) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(GrcError::Numerical {
                        context: format!("optimizer step aborted: non-finite gradient for {name}"),
                    });
                }
            }
        }
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        for name in params.order.clone() {
            let Some(grad) = grads.get(&name) else { continue };
            let tensor = params.get_mut(&name);
            let n = tensor.data.len();
            let m = self.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            for i in 0..n {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * grad[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                tensor.data[i] -= self.learning_rate * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// On-disk checkpoint: a header plus the full parameter map. JSON floats are
/// written with shortest-exact formatting, so save/load round-trips bit for
/// bit.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub header: serde_json::Value,
    pub order: Vec<String>,
    pub params: BTreeMap<String, TensorData>,
}

pub const CHECKPOINT_FORMAT: &str = "grc-params-v1";

pub fn save_checkpoint(path: &Path, header: serde_json::Value, params: &Parameters) -> Result<()> {
    let ckpt = Checkpoint {
        format: CHECKPOINT_FORMAT.to_string(),
        header,
        order: params.order.clone(),
        params: params
            .order
            .iter()
            .map(|name| (name.clone(), params.map[name].clone()))
            .collect(),
    };
    let json = serde_json::to_string(&ckpt)?;
    std::fs::write(path, json).map_err(|e| GrcError::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Parameters)> {
    let raw = std::fs::read_to_string(path)
        .map_err(|e| GrcError::io(path.display().to_string(), e))?;
    let ckpt: Checkpoint = serde_json::from_str(&raw)?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(GrcError::Data(format!(
            "{}: unsupported checkpoint format {}",
            path.display(),
            ckpt.format
        )));
    }
    let mut params = Parameters::new();
    for name in &ckpt.order {
        let tensor = ckpt.params.get(name).ok_or_else(|| {
            GrcError::Data(format!("{}: parameter {name} listed but missing", path.display()))
        })?;
        params.insert(name, tensor.clone());
    }
    Ok((ckpt.header, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn toy_params() -> Parameters {
        let mut p = Parameters::new();
        p.insert("w", TensorData::new(vec![2], vec![1.0, -0.5]));
        p.insert("b", TensorData::new(vec![1], vec![0.25]));
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = toy_params();
        let before = params.clone();
        let mut grads = GradStore::new();
        grads.accumulate("w", &[0.0, 0.0]);
        grads.accumulate("b", &[0.0]);
        let mut adam = AdamState::new(1e-3);
        adam.step(&mut params, &grads).unwrap();
        assert!(params.bit_identical(&before));
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn constant_gradient_moves_against_its_sign() {
        let mut params = Parameters::new();
        params.insert("x", TensorData::new(vec![1], vec![0.0]));
        let mut adam = AdamState::new(1e-2);
        for _ in 0..50 {
            let mut grads = GradStore::new();
            grads.accumulate("x", &[3.0]);
            adam.step(&mut params, &grads).unwrap();
        }
        assert!(params.get("x").data[0] < -0.1);
    }

    #[test]
    fn single_step_on_quadratic_shrinks_x() {
        // f(x) = x^2 at x = 1: first Adam step moves by lr / (1 + eps').
        let mut params = Parameters::new();
        params.insert("x", TensorData::new(vec![1], vec![1.0]));
        let mut adam = AdamState::new(0.1);
        let mut grads = GradStore::new();
        grads.accumulate("x", &[2.0]);
        adam.step(&mut params, &grads).unwrap();
        let x = params.get("x").data[0];
        assert!(x.abs() < 1.0);
        assert!((x - 0.9).abs() < 1e-6);
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut params = toy_params();
        let before = params.clone();
        let mut adam = AdamState::new(1e-3);
        let mut grads = GradStore::new();
        grads.accumulate("w", &[f64::NAN, 0.0]);
        let err = adam.step(&mut params, &grads).unwrap_err();
        assert!(matches!(err, GrcError::Numerical { .. }));
        assert!(params.bit_identical(&before));
        assert_eq!(adam.step, 0);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.json");
        let mut rng = stream_rng(99, &[]);
        let mut params = Parameters::new();
        params.insert_gaussian("layer.w", vec![3, 4], 0.7, &mut rng);
        params.insert_gaussian("layer.b", vec![4], 1e-17, &mut rng);
        params.insert_const("gamma", vec![4], 1.0);
        save_checkpoint(&path, serde_json::json!({"kind": "test"}), &params).unwrap();
        let (header, loaded) = load_checkpoint(&path).unwrap();
        assert_eq!(header["kind"], "test");
        assert!(params.bit_identical(&loaded));
    }

    #[test]
    fn deterministic_updates_for_identical_inputs() {
        let run = || {
            let mut params = toy_params();
            let mut adam = AdamState::new(5e-3);
            for step in 0..10 {
                let mut grads = GradStore::new();
                grads.accumulate("w", &[0.1 * step as f64, -0.2]);
                grads.accumulate("b", &[0.05]);
                adam.step(&mut params, &grads).unwrap();
            }
            params
        };
        assert!(run().bit_identical(&run()));
    }
}
