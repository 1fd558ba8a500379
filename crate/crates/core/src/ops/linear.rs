use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `y = x · Wᵀ + b` with `x: [B, in]`, `W: [out, in]`, `b: [out]`.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<Tensor<T>> {
    let (batch, fan_in, fan_out) = check(input, weight, bias)?;
    let mut out = vec![T::zero(); batch * fan_out];
    for row in out.chunks_mut(fan_out) {
        row.copy_from_slice(bias);
    }
    T::gemm(
        batch,
        fan_in,
        fan_out,
        T::one(),
        input.data(),
        fan_in as isize,
        1,
        weight.data(),
        1,
        fan_in as isize,
        T::one(),
        &mut out,
        fan_out as isize,
        1,
    );
    Tensor::new(&[batch, fan_out], out)
}

pub struct LinearGrads<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
    pub input: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let (batch, fan_in, fan_out) = (input.shape()[0], weight.shape()[1], weight.shape()[0]);
    if grad_out.shape() != [batch, fan_out] {
        return Err(Error::shape("linear_backward", "upstream features", fan_out, grad_out.len() / batch.max(1)));
    }
    let mut dw = vec![T::zero(); fan_out * fan_in];
    T::gemm(
        fan_out,
        batch,
        fan_in,
        T::one(),
        grad_out.data(),
        1,
        fan_out as isize,
        input.data(),
        fan_in as isize,
        1,
        T::zero(),
        &mut dw,
        fan_in as isize,
        1,
    );
    let mut db = vec![T::zero(); fan_out];
    for row in grad_out.data().chunks(fan_out) {
        for (d, &g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dx = vec![T::zero(); batch * fan_in];
    T::gemm(
        batch,
        fan_out,
        fan_in,
        T::one(),
        grad_out.data(),
        fan_out as isize,
        1,
        weight.data(),
        fan_in as isize,
        1,
        T::zero(),
        &mut dx,
        fan_in as isize,
        1,
    );
    Ok(LinearGrads {
        weight: Tensor::new(weight.shape(), dw)?,
        bias: db,
        input: Tensor::new(input.shape(), dx)?,
    })
}

fn check<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &[T]) -> Result<(usize, usize, usize)> {
    if input.rank() != 2 {
        return Err(Error::shape("linear", "input rank", 2, input.rank()));
    }
    if weight.rank() != 2 {
        return Err(Error::shape("linear", "weight rank", 2, weight.rank()));
    }
    let (batch, fan_in) = (input.shape()[0], input.shape()[1]);
    let fan_out = weight.shape()[0];
    if weight.shape()[1] != fan_in {
        return Err(Error::shape("linear", "input features (axis 1)", weight.shape()[1], fan_in));
    }
    if bias.len() != fan_out {
        return Err(Error::shape("linear", "bias length", fan_out, bias.len()));
    }
    Ok((batch, fan_in, fan_out))
}
