//! Dense row-major f64 tensors.
//!
//! This is the single value type flowing through the model: flat `Vec<f64>`
//! storage plus a shape. All layouts are row-major, so `reshape` has exactly
//! one meaning (for the query gate: flat index = query_index * D + dim).

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch {
                expected: format!("{shape:?} ({numel} elements)"),
                actual: format!("{} elements", data.len()),
                op: "Tensor::new",
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Normal(0, std) init, the default for embedding tables and projections.
    pub fn randn(shape: &[usize], std: f64, rng: &mut ChaCha12Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| std * gaussian(rng)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Box-Muller transform; two uniforms in, one gaussian out. The second
/// draw is discarded so consumption per call is fixed (reproducibility).
fn gaussian(rng: &mut ChaCha12Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
