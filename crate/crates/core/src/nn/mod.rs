//! Minimal CPU training engine: NCHW tensors, layers with hand-written
//! backward passes, and the Adam optimizer.
//!
//! Layers cache what their backward pass needs during [`Layer::forward`];
//! [`Layer::infer`] is the cache-free evaluation path and takes `&self`, so
//! frozen models can be shared across threads.

mod adam;
mod layers;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use layers::{BatchNorm2d, Conv2d, Hourglass, MaxPool2, Relu, Residual, Sequential, Upsample2};
pub use tensor::Tensor;

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Named parameter or buffer. Buffers (`trainable == false`) are saved in
/// checkpoints but never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f32>, trainable: bool) -> Self {
        let n: usize = shape.iter().product();
        assert_eq!(n, value.len(), "param value does not match shape");
        Self { name: name.into(), shape, grad: vec![0.0; n], value, trainable }
    }

    pub fn filled(name: impl Into<String>, shape: Vec<usize>, v: f32, trainable: bool) -> Self {
        let n = shape.iter().product();
        Self::new(name, shape, vec![v; n], trainable)
    }

    /// He-normal initialisation for a layer with the given fan-in.
    pub fn kaiming<R: Rng + ?Sized>(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let n = shape.iter().product();
        let value = (0..n).map(|_| normal.sample(rng) as f32).collect();
        Self::new(name, shape, value, true)
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

pub trait Layer: Send + Sync {
    /// Training-mode forward pass; caches activations for `backward`.
    fn forward(&mut self, x: &Tensor) -> Tensor;

    /// Evaluation-mode forward pass without caching.
    fn infer(&self, x: &Tensor) -> Tensor;

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    fn params(&self) -> Vec<&Param>;

    fn params_mut(&mut self) -> Vec<&mut Param>;

    /// Drop cached activations.
    fn clear_cache(&mut self) {}
}
