//! Minimal neural substrate: dense tensors, a reverse-mode tape, LSTM and MLP
//! layers, an adaptive-moment optimizer, and a versioned weight container.
//!
//! Everything is generic over [`Element`] so the production path runs in f32
//! while gradient-check tests run the same code in f64.

pub mod adam;
pub mod check;
pub mod lstm;
pub mod mlp;
pub mod tape;
pub mod tensor;
pub mod weights;

use rand::Rng;

pub use adam::{Adam, AdamConfig};
pub use check::{finite_difference_check, sample_coordinates, CheckReport, CheckSettings};
pub use lstm::{BiLstmLayer, BiLstmOutput};
pub use mlp::Mlp;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use weights::WeightsFile;

/// Scalar type of the numeric path.
pub trait Element:
    num_traits::Float
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    fn from_f64(v: f64) -> Self;
    fn into_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn into_f32(self) -> f32;
}

impl Element for f32 {
    const DTYPE: &'static str = "f32";
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn into_f64(self) -> f64 {
        f64::from(self)
    }
    fn from_f32(v: f32) -> Self {
        v
    }
    fn into_f32(self) -> f32 {
        self
    }
}

impl Element for f64 {
    const DTYPE: &'static str = "f64";
    fn from_f64(v: f64) -> Self {
        v
    }
    fn into_f64(self) -> f64 {
        self
    }
    fn from_f32(v: f32) -> Self {
        f64::from(v)
    }
    fn into_f32(self) -> f32 {
        self as f32
    }
}

/// A named trainable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Element> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Parameter<T> {
        let grad = Tensor::zeros(value.shape());
        Parameter { name: name.into(), value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::zero();
        }
    }
}

/// Uniform(-bound, +bound) tensor; draws happen in f64 so the draw sequence
/// is identical regardless of the element type.
pub fn uniform_tensor<T: Element, R: Rng>(rng: &mut R, shape: &[usize], bound: f64) -> Tensor<T> {
    let len: usize = shape.iter().product();
    let data = (0..len)
        .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape, data)
}

/// Standard uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weight init.
pub fn linear_init<T: Element, R: Rng>(rng: &mut R, out_dim: usize, in_dim: usize) -> Tensor<T> {
    uniform_tensor(rng, &[out_dim, in_dim], 1.0 / (in_dim as f64).sqrt())
}
