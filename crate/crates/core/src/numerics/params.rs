use super::Tensor;
use crate::error::{Error, Result};

/// Index of a parameter inside a [`ParameterStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adam hyperparameters. Defaults: β₁ = 0.95, β₂ = 0.999, ε = 1e-4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.95,
            beta2: 0.999,
            epsilon: 1e-4,
        }
    }
}

/// Named parameter tensors plus their Adam moments.
#[derive(Clone, Debug, Default)]
pub struct ParameterStore {
    names: Vec<String>,
    params: Vec<Tensor>,
    first_moment: Vec<Vec<f32>>,
    second_moment: Vec<Vec<f32>>,
    step: u64,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let len = tensor.len();
        self.names.push(name.into());
        self.params.push(tensor);
        self.first_moment.push(vec![0.0; len]);
        self.second_moment.push(vec![0.0; len]);
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.params)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Adds `grads` into each parameter's gradient buffer.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        if grads.buffers.len() != self.params.len() {
            return Err(Error::shape("gradient set does not match parameter store"));
        }
        for (p, g) in self.params.iter_mut().zip(&grads.buffers) {
            if g.len() != p.len() {
                return Err(Error::shape("gradient buffer length mismatch"));
            }
            super::kernels::axpy(1.0, g, p.grad_mut());
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.params.iter_mut().for_each(Tensor::clear_grad);
    }

    /// Replaces every parameter value with the one of the same name in `other`.
    pub(crate) fn replace_values(&mut self, names: &[String], tensors: Vec<Tensor>) -> Result<()> {
        for (name, t) in names.iter().zip(tensors) {
            let id = self
                .find(name)
                .ok_or_else(|| Error::CorruptCheckpoint(format!("unknown parameter {name}")))?;
            if self.params[id.0].shape() != t.shape() {
                return Err(Error::CorruptCheckpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    self.params[id.0].shape()
                )));
            }
            self.params[id.0] = t;
        }
        Ok(())
    }
}

/// Gradient buffers aligned with a [`ParameterStore`], used for
/// worker-local accumulation before merging.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    buffers: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParameterStore) -> Self {
        Gradients {
            buffers: store.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f32] {
        &self.buffers[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f32] {
        &mut self.buffers[id.0]
    }

    /// Two distinct buffers borrowed mutably at once.
    pub fn pair_mut(&mut self, a: ParamId, b: ParamId) -> (&mut [f32], &mut [f32]) {
        assert_ne!(a, b, "pair_mut needs two distinct parameters");
        if a.0 < b.0 {
            let (lo, hi) = self.buffers.split_at_mut(b.0);
            (&mut lo[a.0], &mut hi[0])
        } else {
            let (lo, hi) = self.buffers.split_at_mut(a.0);
            (&mut hi[0], &mut lo[b.0])
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.buffers.iter_mut().zip(&other.buffers) {
            super::kernels::axpy(1.0, b, a);
        }
    }

    pub fn max_abs(&self) -> f32 {
        self.buffers
            .iter()
            .flatten()
            .fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// One bias-corrected Adam update over every parameter, then clears the
/// gradients.
pub fn adam_step(store: &mut ParameterStore, learning_rate: f64, config: &AdamConfig) -> Result<()> {
    if learning_rate.is_nan() || learning_rate <= 0.0 {
        return Err(Error::invalid_argument("learning rate must be positive"));
    }
    if let Some(i) = store.params.iter().position(|p| p.grad().is_none()) {
        return Err(Error::invalid_state(format!(
            "parameter {} has no gradient",
            store.names[i]
        )));
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let correction1 = 1.0 - b1.powi(t);
    let correction2 = 1.0 - b2.powi(t);
    let step_size = (learning_rate / correction1) as f32;
    let inv_sqrt_c2 = (1.0 / correction2.sqrt()) as f32;
    let eps = config.epsilon as f32;
    let (b1, b2) = (b1 as f32, b2 as f32);
    for ((p, m), v) in store
        .params
        .iter_mut()
        .zip(&mut store.first_moment)
        .zip(&mut store.second_moment)
    {
        let g = p.grad().expect("checked above").to_vec();
        let values = p.values_mut();
        for i in 0..values.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            values[i] -= step_size * m[i] / (v[i].sqrt() * inv_sqrt_c2 + eps);
        }
        p.clear_grad();
    }
    Ok(())
}
