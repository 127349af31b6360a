//! Minimal differentiable tensor engine for the 3D encoder-decoder.
//!
//! Each operator comes as a forward function plus an explicit backward
//! function; the network in [`crate::unet`] keeps the activations it needs and
//! calls the backward functions in reverse order. There is no general autodiff.

mod conv;
mod ops;
mod tensor;

pub use conv::{
    conv3d_1x1, conv3d_1x1_backward, conv3d_same, conv3d_same_backward, upconv3d_2, upconv3d_2_backward, ConvGrads,
};
pub use ops::{
    concat_channels, maxpool3d_2, maxpool3d_2_backward, relu, relu_backward, softmax_channels,
    softmax_channels_backward, split_channels, Pooled,
};
pub use tensor::{Real, Tensor};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// A trainable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor<f32>,
    pub grad: Tensor<f32>,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor<f32>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(0.0);
    }
}

/// He (Kaiming) normal initialization: i.i.d. `N(0, 2 / fan_in)`.
pub fn he_init<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Result<Tensor<f32>> {
    let normal = he_distribution(fan_in)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| normal.sample(rng) as f32).collect();
    Tensor::new(shape.to_vec(), data)
}

/// The sampling distribution used by [`he_init`].
pub fn he_distribution(fan_in: usize) -> Result<Normal<f64>> {
    if fan_in == 0 {
        return Err(Error::usage("He initialization needs fan_in > 0"));
    }
    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).map_err(|e| Error::usage(e.to_string()))
}

/// Plain SGD: `value -= lr * grad`, then zero every gradient.
///
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves the parameters unchanged.
pub fn sgd_step(params: &mut [Parameter], lr: f32, iteration: usize) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::usage(format!("learning rate must be positive, got {lr}")));
    }
    if let Some(p) = params.iter().find(|p| !p.grad.is_finite()) {
        return Err(Error::Divergence {
            iteration,
            reason: format!("non-finite gradient in parameter {}", p.name),
        });
    }
    for p in params.iter_mut() {
        for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
            *v -= lr * *g;
        }
        p.zero_grad();
    }
    Ok(())
}

#[cfg(test)]
mod tests;
