use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

/// Weights drawn i.i.d. from `N(0, 2 / fan_in)`.
///
/// No leaky-slope correction is applied to the variance.
pub fn he_init<R: Rng + ?Sized>(shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Result<Tensor> {
    if fan_in == 0 {
        return Err(Error::invalid_argument("he_init requires fan_in >= 1"));
    }
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid_argument(e.to_string()))?;
    let len = shape.iter().product();
    let values = (0..len).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape, values)
}

pub fn zeros_bias(shape: Vec<usize>) -> Tensor {
    Tensor::zeros(shape)
}
