use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Flat input offsets of the selected maxima, kept for the backward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoolIndices {
    pub input_shape: Vec<usize>,
    pub argmax: Vec<usize>,
}

fn nchw(input_shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    if input_shape.len() != 4 {
        return Err(Error::shape(op, "input rank", 4, input_shape.len()));
    }
    Ok([input_shape[0], input_shape[1], input_shape[2], input_shape[3]])
}

/// 2×2 non-overlapping max pooling over `[B, C, H, W]`. Ties keep the first
/// element in row-major window order.
pub fn maxpool2_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [b, c, h, w] = nchw(input.shape(), "maxpool2")?;
    if h % 2 != 0 {
        return Err(Error::invalid("maxpool2", format!("height {h} is odd")));
    }
    if w % 2 != 0 {
        return Err(Error::invalid("maxpool2", format!("width {w} is odd")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let src = input.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    let mut argmax = Vec::with_capacity(b * c * oh * ow);
    for plane in 0..b * c {
        let base = plane * h * w;
        for y in 0..oh {
            for x in 0..ow {
                let mut best = base + 2 * y * w + 2 * x;
                for off in [1, w, w + 1] {
                    let cand = base + 2 * y * w + 2 * x + off;
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((
        Tensor::new(&[b, c, oh, ow], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Max over the whole spatial plane: `[B, C, H, W]` to `[B, C, 1, 1]`.
pub fn global_maxpool_forward<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    let [b, c, h, w] = nchw(input.shape(), "global_maxpool")?;
    if h * w == 0 {
        return Err(Error::invalid("global_maxpool", "empty spatial extent"));
    }
    let src = input.data();
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c);
    let mut argmax = Vec::with_capacity(b * c);
    for p in 0..b * c {
        let base = p * plane;
        let mut best = base;
        for i in base + 1..base + plane {
            if src[i] > src[best] {
                best = i;
            }
        }
        out.push(src[best]);
        argmax.push(best);
    }
    Ok((
        Tensor::new(&[b, c, 1, 1], out)?,
        PoolIndices {
            input_shape: input.shape().to_vec(),
            argmax,
        },
    ))
}

/// Routes each upstream value to the input position that won the max.
pub fn pool_backward<T: Scalar>(indices: &PoolIndices, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if grad_out.len() != indices.argmax.len() {
        return Err(Error::shape(
            "pool_backward",
            "upstream length",
            indices.argmax.len(),
            grad_out.len(),
        ));
    }
    let mut grad = Tensor::zeros(&indices.input_shape);
    let dst = grad.data_mut();
    for (&i, &g) in indices.argmax.iter().zip(grad_out.data()) {
        dst[i] += g;
    }
    Ok(grad)
}

/// Single-image form over `[C, H, W]`.
pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, PoolIndices)> {
    if input.rank() != 3 {
        return Err(Error::shape("maxpool2", "input rank", 3, input.rank()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let (out, idx) = maxpool2_forward(&input.clone().reshape(&shape)?)?;
    let out_shape = out.shape()[1..].to_vec();
    Ok((out.reshape(&out_shape)?, idx))
}
