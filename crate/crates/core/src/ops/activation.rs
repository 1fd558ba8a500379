use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Gradient of ReLU given its forward output (zero at and below the kink).
pub fn relu_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.check_same_shape(grad_out, "relu_backward")?;
    let mut grad = grad_out.clone();
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(grad)
}

/// Inverted dropout: kept units are scaled by `1 / (1 - rate)` so evaluation
/// mode is the identity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    rate: f64,
}

impl Dropout {
    pub fn new(rate: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout", format!("rate {rate} outside [0, 1)")));
        }
        Ok(Self { rate })
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    /// Returns the output and the mask (already scaled) used to produce it.
    /// With `train == false` the mask is `None` and the input passes through.
    pub fn forward<T: Scalar, R: Rng>(
        &self,
        input: &Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> (Tensor<T>, Option<Vec<T>>) {
        if !train || self.rate == 0.0 {
            return (input.clone(), None);
        }
        let keep = T::of(1.0 / (1.0 - self.rate));
        let mask: Vec<T> = (0..input.len())
            .map(|_| if rng.random::<f64>() < self.rate { T::zero() } else { keep })
            .collect();
        let mut out = input.clone();
        for (o, &m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        (out, Some(mask))
    }

    pub fn backward<T: Scalar>(mask: Option<&[T]>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut grad = grad_out.clone();
        if let Some(mask) = mask {
            if mask.len() != grad.len() {
                return Err(Error::shape("dropout_backward", "mask length", grad.len(), mask.len()));
            }
            for (g, &m) in grad.data_mut().iter_mut().zip(mask) {
                *g *= m;
            }
        }
        Ok(grad)
    }
}
