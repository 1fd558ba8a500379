//! Standard 2-D cross-correlation (no kernel flip) via im2col + GEMM.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Geometry of one batched convolution call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn positions(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolded input kept from the forward pass for the weight gradient.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    pub geometry: ConvGeometry,
    cols: Vec<T>,
}

fn validate<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, padding: usize) -> Result<ConvGeometry> {
    const OP: &str = "conv2d";
    if input.rank() != 4 {
        return Err(Error::shape(OP, "input rank", 4, input.rank()));
    }
    if kernels.rank() != 4 {
        return Err(Error::shape(OP, "kernel rank", 4, kernels.rank()));
    }
    let [batch, in_channels, height, width] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let [out_channels, k_in, kh, kw] = [kernels.shape()[0], kernels.shape()[1], kernels.shape()[2], kernels.shape()[3]];
    if k_in != in_channels {
        return Err(Error::shape(OP, "input channels (axis 1)", k_in, in_channels));
    }
    if kh != kw {
        return Err(Error::shape(OP, "kernel width (axis 3)", kh, kw));
    }
    if kh % 2 == 0 {
        return Err(Error::invalid(OP, format!("kernel extent {kh} must be odd")));
    }
    if height + 2 * padding < kh {
        return Err(Error::shape(OP, "input height (axis 2)", kh, height + 2 * padding));
    }
    if width + 2 * padding < kw {
        return Err(Error::shape(OP, "input width (axis 3)", kw, width + 2 * padding));
    }
    Ok(ConvGeometry {
        batch,
        in_channels,
        height,
        width,
        out_channels,
        kernel: kh,
        padding,
    })
}

fn im2col<T: Scalar>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let row_len = g.batch * positions;
    let mut cols = vec![T::zero(); g.patch_len() * row_len];
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let dst_row = &mut cols[row * row_len..(row + 1) * row_len];
                for b in 0..g.batch {
                    let src = &input[(b * g.in_channels + c) * plane..][..plane];
                    let dst = &mut dst_row[b * positions..(b + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst[oy * ow + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let (oh, ow) = (g.out_height(), g.out_width());
    let positions = oh * ow;
    let row_len = g.batch * positions;
    let plane = g.height * g.width;
    let mut out = vec![T::zero(); g.batch * g.in_channels * plane];
    for c in 0..g.in_channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * g.kernel + ky) * g.kernel + kx;
                let src_row = &cols[row * row_len..(row + 1) * row_len];
                for b in 0..g.batch {
                    let dst = &mut out[(b * g.in_channels + c) * plane..][..plane];
                    let src = &src_row[b * positions..(b + 1) * positions];
                    for oy in 0..oh {
                        let iy = (oy + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        for ox in 0..ow {
                            let ix = (ox + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Batched forward pass. `input` is `[B, C_in, H, W]`, `kernels` is
/// `[C_out, C_in, k, k]`, output is `[B, C_out, H', W']`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: Option<&[T]>,
    padding: usize,
) -> Result<(Tensor<T>, ConvCache<T>)> {
    let g = validate(input, kernels, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::shape("conv2d", "bias length", g.out_channels, b.len()));
        }
    }
    let cols = im2col(input.data(), &g);
    let positions = g.positions();
    let n = g.batch * positions;
    let k = g.patch_len();
    let mut mat = vec![T::zero(); g.out_channels * n];
    T::gemm(
        g.out_channels,
        k,
        n,
        T::one(),
        kernels.data(),
        k as isize,
        1,
        &cols,
        n as isize,
        1,
        T::zero(),
        &mut mat,
        n as isize,
        1,
    );
    let mut out = vec![T::zero(); g.batch * g.out_channels * positions];
    for o in 0..g.out_channels {
        let bias_o = bias.map_or(T::zero(), |b| b[o]);
        let src = &mat[o * n..(o + 1) * n];
        for b in 0..g.batch {
            let dst = &mut out[(b * g.out_channels + o) * positions..][..positions];
            for (d, &s) in dst.iter_mut().zip(&src[b * positions..(b + 1) * positions]) {
                *d = s + bias_o;
            }
        }
    }
    let out = Tensor::new(&[g.batch, g.out_channels, g.out_height(), g.out_width()], out)?;
    Ok((out, ConvCache { geometry: g, cols }))
}

/// Gradients of a batched convolution.
#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    pub kernels: Tensor<T>,
    pub bias: Vec<T>,
    pub input: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    cache: &ConvCache<T>,
    kernels: &Tensor<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<ConvGrads<T>> {
    let g = cache.geometry;
    let expected = [g.batch, g.out_channels, g.out_height(), g.out_width()];
    if grad_out.rank() != 4 {
        return Err(Error::shape("conv2d_backward", "upstream rank", 4, grad_out.rank()));
    }
    for (axis, (&e, &a)) in expected.iter().zip(grad_out.shape()).enumerate() {
        if e != a {
            return Err(Error::shape("conv2d_backward", format!("upstream axis {axis}"), e, a));
        }
    }
    let positions = g.positions();
    let n = g.batch * positions;
    let k = g.patch_len();

    let mut gmat = vec![T::zero(); g.out_channels * n];
    let mut bias = vec![T::zero(); g.out_channels];
    for b in 0..g.batch {
        for o in 0..g.out_channels {
            let src = &grad_out.data()[(b * g.out_channels + o) * positions..][..positions];
            gmat[o * n + b * positions..o * n + (b + 1) * positions].copy_from_slice(src);
            bias[o] += src.iter().copied().sum();
        }
    }

    let mut dk = vec![T::zero(); g.out_channels * k];
    T::gemm(
        g.out_channels,
        n,
        k,
        T::one(),
        &gmat,
        n as isize,
        1,
        &cache.cols,
        1,
        n as isize,
        T::zero(),
        &mut dk,
        k as isize,
        1,
    );

    let input = if want_input_grad {
        let mut dcols = vec![T::zero(); k * n];
        T::gemm(
            k,
            g.out_channels,
            n,
            T::one(),
            kernels.data(),
            1,
            k as isize,
            &gmat,
            n as isize,
            1,
            T::zero(),
            &mut dcols,
            n as isize,
            1,
        );
        let dx = col2im(&dcols, &g);
        Some(Tensor::new(&[g.batch, g.in_channels, g.height, g.width], dx)?)
    } else {
        None
    };

    Ok(ConvGrads {
        kernels: Tensor::new(kernels.shape(), dk)?,
        bias,
        input,
    })
}

/// Single-image convenience form: `input` is `[C_in, H, W]`, output `[C_out, H', W']`.
pub fn conv2d<T: Scalar>(input: &Tensor<T>, kernels: &Tensor<T>, padding: usize) -> Result<Tensor<T>> {
    if input.rank() != 3 {
        return Err(Error::shape("conv2d", "input rank", 3, input.rank()));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(input.shape());
    let (out, _) = conv2d_forward(&input.clone().reshape(&shape)?, kernels, None, padding)?;
    let out_shape = out.shape()[1..].to_vec();
    out.reshape(&out_shape)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(input: &Tensor<f64>, kernels: &Tensor<f64>, padding: usize) -> Tensor<f64> {
        let (b, c, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (o, k) = (kernels.shape()[0], kernels.shape()[2]);
        let (oh, ow) = (h + 2 * padding + 1 - k, w + 2 * padding + 1 - k);
        Tensor::from_fn(&[b, o, oh, ow], |i| {
            let mut acc = 0.0;
            for ci in 0..c {
                for ky in 0..k {
                    for kx in 0..k {
                        let y = (i[2] + ky) as isize - padding as isize;
                        let x = (i[3] + kx) as isize - padding as isize;
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            acc += input.get(&[i[0], ci, y as usize, x as usize]) * kernels.get(&[i[1], ci, ky, kx]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn pseudo(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut s = seed;
        Tensor::from_fn(shape, |_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let x = Tensor::<f64>::zeros(&[1, 3, 3]);
        let k = pseudo(&[2, 1, 3, 3], 1);
        let y = conv2d(&x, &k, 1).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel() {
        let x = pseudo(&[1, 5, 4], 2);
        let k = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 0).unwrap(), x);
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &k, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[45.0]);
    }

    #[test]
    fn cross_correlation_no_flip() {
        // a kernel with a single 1 at the top-left reads the top-left neighbour
        let x = Tensor::new(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let mut k = Tensor::zeros(&[1, 1, 3, 3]);
        k.set(&[0, 0, 0, 0], 1.0);
        let y = conv2d(&x, &k, 1).unwrap();
        assert_eq!(y.get(&[0, 1, 1]), 1.0);
        assert_eq!(y.get(&[0, 2, 2]), 5.0);
    }

    #[test]
    fn matches_naive_with_padding() {
        for &(pad, k) in &[(0, 3), (1, 3), (2, 5), (0, 1)] {
            let x = pseudo(&[2, 3, 6, 5], 3);
            let w = pseudo(&[4, 3, k, k], 4);
            let (y, _) = conv2d_forward(&x, &w, None, pad).unwrap();
            let want = naive(&x, &w, pad);
            assert!(y.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn mismatched_channels_name_the_axis() {
        let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
        let err = conv2d_forward(&x, &w, None, 1).unwrap_err().to_string();
        assert!(err.contains("input channels"), "{err}");
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4]);
        let w = Tensor::<f64>::zeros(&[1, 1, 2, 2]);
        assert!(conv2d_forward(&x, &w, None, 0).is_err());
    }

    #[test]
    fn linear_in_input() {
        let x = pseudo(&[1, 2, 5, 5], 5);
        let z = pseudo(&[1, 2, 5, 5], 6);
        let w = pseudo(&[3, 2, 3, 3], 7);
        let (a, b) = (0.7, -1.3);
        let mut combo = x.clone();
        for (c, (&xv, &zv)) in combo.data_mut().iter_mut().zip(x.data().iter().zip(z.data())) {
            *c = a * xv + b * zv;
        }
        let lhs = conv2d_forward(&combo, &w, None, 1).unwrap().0;
        let yx = conv2d_forward(&x, &w, None, 1).unwrap().0;
        let yz = conv2d_forward(&z, &w, None, 1).unwrap().0;
        for ((&l, &p), &q) in lhs.data().iter().zip(yx.data()).zip(yz.data()) {
            let r = a * p + b * q;
            assert!((l - r).abs() <= 1e-6 * r.abs().max(1.0));
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = pseudo(&[2, 2, 5, 4], 8);
        let w = pseudo(&[3, 2, 3, 3], 9);
        let bias = vec![0.1, -0.2, 0.3];
        let up = pseudo(&[2, 3, 5, 4], 10);
        let loss = |x: &Tensor<f64>, w: &Tensor<f64>, bias: &[f64]| -> f64 {
            let (y, _) = conv2d_forward(x, w, Some(bias), 1).unwrap();
            y.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = conv2d_forward(&x, &w, Some(&bias), 1).unwrap();
        let grads = conv2d_backward(&cache, &w, &up, true).unwrap();
        let h = 1e-6;
        let rel = |a: f64, n: f64| (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
        for i in 0..w.len() {
            let (mut p, mut m) = (w.clone(), w.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (loss(&x, &p, &bias) - loss(&x, &m, &bias)) / (2.0 * h);
            assert!(rel(grads.kernels.data()[i], num) < 1e-5);
        }
        let dx = grads.input.unwrap();
        for i in 0..x.len() {
            let (mut p, mut m) = (x.clone(), x.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let num = (loss(&p, &w, &bias) - loss(&m, &w, &bias)) / (2.0 * h);
            assert!(rel(dx.data()[i], num) < 1e-5);
        }
        for o in 0..3 {
            let (mut p, mut m) = (bias.clone(), bias.clone());
            p[o] += h;
            m[o] -= h;
            let num = (loss(&x, &w, &p) - loss(&x, &w, &m)) / (2.0 * h);
            assert!(rel(grads.bias[o], num) < 1e-5);
        }
    }
}
