//! Oriented response convolution.
//!
//! Output orientation channel `k` of output feature `c` is
//! `Σ_{c_in} Σ_n F_{θ_k}^{(n)} ⋆ M^{(n)}` with `θ_k = k·2π/N`, where `F` is the
//! canonical ARF linking `c_in` to `c`. The `N` rotated copies are expanded
//! into a virtual kernel bank for one ordinary convolution; on the way back the
//! gradient of every rotated copy is aligned onto the canonical filter and
//! summed, so only the canonical filters are ever stored or updated.

use crate::arf::{align_gradient, rotate_steps, Arf, RotationPath};
use crate::error::{Error, Result};
use crate::ops::{conv2d_backward, conv2d_forward, ConvCache};
use crate::tensor::{Scalar, Tensor};

/// Feature map `[C, N, H, W]`: `C` features, each with `N` orientation channels.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientedFeatureMap<T> {
    values: Tensor<T>,
}

impl<T: Scalar> OrientedFeatureMap<T> {
    pub fn new(values: Tensor<T>) -> Result<Self> {
        if values.rank() != 4 {
            return Err(Error::shape("OrientedFeatureMap", "rank", 4, values.rank()));
        }
        if values.shape()[1] == 0 {
            return Err(Error::invalid("OrientedFeatureMap", "orientation count must be at least 1"));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Tensor<T> {
        &self.values
    }

    pub fn into_values(self) -> Tensor<T> {
        self.values
    }

    pub fn features(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn orientations(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[3]
    }

    /// Average over orientation channels, giving `[C, H, W]`.
    pub fn mean_over_orientations(&self) -> Tensor<T> {
        let (c, n, h, w) = (self.features(), self.orientations(), self.height(), self.width());
        let inv = T::one() / T::of(n as f64);
        Tensor::from_fn(&[c, h, w], |i| {
            let mut acc = T::zero();
            for o in 0..n {
                acc += self.values.get(&[i[0], o, i[1], i[2]]);
            }
            acc * inv
        })
    }
}

/// Lifts an image `[C, H, W]` to an oriented map by replicating every pixel
/// across the `N` orientation channels.
pub fn extend_to_omnidirectional<T: Scalar>(image: &Tensor<T>, n: usize) -> Result<OrientedFeatureMap<T>> {
    if image.rank() != 3 {
        return Err(Error::shape("extend_to_omnidirectional", "image rank", 3, image.rank()));
    }
    if n == 0 {
        return Err(Error::invalid("extend_to_omnidirectional", "N must be at least 1"));
    }
    let s = image.shape();
    let mut batched = vec![1];
    batched.extend_from_slice(s);
    let lifted = extend_batch(&image.clone().reshape(&batched)?, n)?;
    OrientedFeatureMap::new(lifted.reshape(&[s[0], n, s[1], s[2]])?)
}

/// Batched lift: `[B, C, H, W]` to `[B, C·N, H, W]`.
pub fn extend_batch<T: Scalar>(input: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    if input.rank() != 4 {
        return Err(Error::shape("extend_to_omnidirectional", "input rank", 4, input.rank()));
    }
    let [b, c, h, w] = [input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]];
    let plane = h * w;
    let mut out = Vec::with_capacity(b * c * n * plane);
    for chunk in input.data().chunks(plane) {
        for _ in 0..n {
            out.extend_from_slice(chunk);
        }
    }
    Tensor::new(&[b, c * n, h, w], out)
}

/// Gradient of [`extend_batch`]: sums the `N` replicated channels.
pub fn extend_batch_backward<T: Scalar>(grad: &Tensor<T>, n: usize) -> Result<Tensor<T>> {
    let [b, cn, h, w] = [grad.shape()[0], grad.shape()[1], grad.shape()[2], grad.shape()[3]];
    if cn % n != 0 {
        return Err(Error::shape("extend_backward", "channel axis", n * (cn / n.max(1)), cn));
    }
    let plane = h * w;
    let mut out = vec![T::zero(); b * (cn / n) * plane];
    for (dst, group) in out.chunks_mut(plane).zip(grad.data().chunks(n * plane)) {
        for src in group.chunks(plane) {
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    Tensor::new(&[b, cn / n, h, w], out)
}

/// The parameters of one ORConv layer: a `C_out × C_in` array of ARFs stored
/// as a single `[C_out, C_in, W, W, N]` tensor, plus one bias per output
/// feature shared by its orientation channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ArfBank<T> {
    filters: Tensor<T>,
    bias: Tensor<T>,
    path: RotationPath,
}

impl<T: Scalar> ArfBank<T> {
    pub fn new(filters: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        if filters.rank() != 5 {
            return Err(Error::shape("ArfBank", "filter rank", 5, filters.rank()));
        }
        let s = filters.shape();
        if s[2] != s[3] {
            return Err(Error::shape("ArfBank", "filter width (axis 3)", s[2], s[3]));
        }
        if s[2].is_multiple_of(2) {
            return Err(Error::invalid("ArfBank", format!("spatial extent {} must be odd", s[2])));
        }
        if s[4] == 0 {
            return Err(Error::invalid("ArfBank", "orientation count must be at least 1"));
        }
        let bias = match bias {
            Some(b) => {
                if b.shape() != [s[0]] {
                    return Err(Error::shape("ArfBank", "bias length", s[0], b.len()));
                }
                b
            }
            None => Tensor::zeros(&[s[0]]),
        };
        let path = RotationPath::for_shape(s[2], s[4]);
        Ok(Self { filters, bias, path })
    }

    pub fn zeros(c_out: usize, c_in: usize, w: usize, n: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[c_out, c_in, w, w, n]), None)
    }

    pub fn from_arfs(arfs: &[Vec<Arf<T>>], bias: Option<Tensor<T>>) -> Result<Self> {
        let c_out = arfs.len();
        let c_in = arfs.first().map_or(0, Vec::len);
        let first = arfs
            .first()
            .and_then(|row| row.first())
            .ok_or_else(|| Error::invalid("ArfBank", "empty filter array"))?;
        let (w, n) = (first.width(), first.orientations());
        let mut data = Vec::with_capacity(c_out * c_in * w * w * n);
        for (o, row) in arfs.iter().enumerate() {
            if row.len() != c_in {
                return Err(Error::shape("ArfBank", format!("input features of row {o}"), c_in, row.len()));
            }
            for arf in row {
                if arf.width() != w || arf.orientations() != n {
                    return Err(Error::invalid("ArfBank", "all ARFs must share W and N"));
                }
                data.extend_from_slice(arf.weights().data());
            }
        }
        Self::new(Tensor::new(&[c_out, c_in, w, w, n], data)?, bias)
    }

    pub fn out_features(&self) -> usize {
        self.filters.shape()[0]
    }

    pub fn in_features(&self) -> usize {
        self.filters.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.filters.shape()[2]
    }

    pub fn orientations(&self) -> usize {
        self.filters.shape()[4]
    }

    pub fn path(&self) -> RotationPath {
        self.path
    }

    pub fn filters(&self) -> &Tensor<T> {
        &self.filters
    }

    pub fn filters_mut(&mut self) -> &mut Tensor<T> {
        &mut self.filters
    }

    pub fn bias(&self) -> &Tensor<T> {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor<T> {
        &mut self.bias
    }

    /// Filters and bias borrowed together.
    pub fn parameters_mut(&mut self) -> (&mut Tensor<T>, &mut Tensor<T>) {
        (&mut self.filters, &mut self.bias)
    }

    /// Number of stored scalars (filters and bias).
    pub fn parameter_count(&self) -> usize {
        self.filters.len() + self.bias.len()
    }

    fn arf_len(&self) -> usize {
        let w = self.width();
        w * w * self.orientations()
    }

    pub fn arf(&self, out_feature: usize, in_feature: usize) -> Arf<T> {
        let len = self.arf_len();
        let start = (out_feature * self.in_features() + in_feature) * len;
        let (w, n) = (self.width(), self.orientations());
        Arf::new(Tensor::new(&[w, w, n], self.filters.data()[start..start + len].to_vec()).expect("slice length"))
            .expect("bank shape validated")
    }

    /// All `N` rotated copies expanded into an ordinary kernel tensor
    /// `[C_out·N, C_in·N, W, W]`; row `o·N + k` holds the `θ_k` copies.
    pub fn virtual_kernels(&self) -> Result<Tensor<T>> {
        let (c_out, c_in, w, n) = (self.out_features(), self.in_features(), self.width(), self.orientations());
        let mut data = vec![T::zero(); c_out * n * c_in * n * w * w];
        let plane = w * w;
        for o in 0..c_out {
            for i in 0..c_in {
                let canonical = self.arf(o, i);
                for k in 0..n {
                    let rotated = rotate_steps(&canonical, k as i64, self.path)?;
                    let rw = rotated.weights().data();
                    for ch in 0..n {
                        let base = (((o * n + k) * c_in * n) + i * n + ch) * plane;
                        for cell in 0..plane {
                            data[base + cell] = rw[cell * n + ch];
                        }
                    }
                }
            }
        }
        Tensor::new(&[c_out * n, c_in * n, w, w], data)
    }

    fn expanded_bias(&self) -> Vec<T> {
        let n = self.orientations();
        self.bias.data().iter().flat_map(|&b| std::iter::repeat_n(b, n)).collect()
    }

    /// Folds a gradient on the virtual kernel bank back onto the canonical
    /// filters: `Σ_k align(δ^{(k)}, θ_k)`.
    pub fn collect_gradient(&self, virtual_grad: &Tensor<T>) -> Result<Tensor<T>> {
        let (c_out, c_in, w, n) = (self.out_features(), self.in_features(), self.width(), self.orientations());
        let expected = [c_out * n, c_in * n, w, w];
        if virtual_grad.shape() != expected {
            return Err(Error::shape("collect_gradient", "virtual kernel length", expected.iter().product(), virtual_grad.len()));
        }
        let plane = w * w;
        let arf_len = self.arf_len();
        let mut out = vec![T::zero(); self.filters.len()];
        let vg = virtual_grad.data();
        for o in 0..c_out {
            for i in 0..c_in {
                let acc = &mut out[(o * c_in + i) * arf_len..][..arf_len];
                for k in 0..n {
                    let mut delta = vec![T::zero(); arf_len];
                    for ch in 0..n {
                        let base = (((o * n + k) * c_in * n) + i * n + ch) * plane;
                        for cell in 0..plane {
                            delta[cell * n + ch] = vg[base + cell];
                        }
                    }
                    let delta = Arf::new(Tensor::new(&[w, w, n], delta)?)?;
                    let aligned = align_gradient(&delta, k as i64, self.path)?;
                    for (a, &d) in acc.iter_mut().zip(aligned.weights().data()) {
                        *a += d;
                    }
                }
            }
        }
        Tensor::new(self.filters.shape(), out)
    }
}

/// Forward state kept for the backward pass of a batched ORConv.
#[derive(Debug, Clone)]
pub struct OrConvCache<T> {
    conv: ConvCache<T>,
    kernels: Tensor<T>,
}

fn check_input<T: Scalar>(bank: &ArfBank<T>, input: &Tensor<T>) -> Result<()> {
    if input.rank() != 4 {
        return Err(Error::shape("orconv_forward", "input rank", 4, input.rank()));
    }
    let n = bank.orientations();
    let channels = input.shape()[1];
    if !channels.is_multiple_of(n) {
        return Err(Error::shape(
            "orconv_forward",
            "orientation channels (input channel axis not a multiple of N)",
            n,
            channels % n,
        ));
    }
    if channels / n != bank.in_features() {
        return Err(Error::shape(
            "orconv_forward",
            "input features (axis 1 / N)",
            bank.in_features(),
            channels / n,
        ));
    }
    Ok(())
}

/// Batched forward: `input` is `[B, C_in·N, H, W]`, output `[B, C_out·N, H', W']`.
pub fn orconv_forward_batch<T: Scalar>(
    bank: &ArfBank<T>,
    input: &Tensor<T>,
    padding: usize,
) -> Result<(Tensor<T>, OrConvCache<T>)> {
    check_input(bank, input)?;
    let kernels = bank.virtual_kernels()?;
    let bias = bank.expanded_bias();
    let (out, conv) = conv2d_forward(input, &kernels, Some(&bias), padding)?;
    Ok((out, OrConvCache { conv, kernels }))
}

/// Gradients produced by ORConv back-propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSignal<T> {
    /// Same shape as the bank's filter tensor.
    pub filters: Tensor<T>,
    pub bias: Tensor<T>,
    /// Same shape as the forward input, when requested.
    pub input: Option<Tensor<T>>,
}

pub fn orconv_backward_batch<T: Scalar>(
    bank: &ArfBank<T>,
    cache: &OrConvCache<T>,
    grad_out: &Tensor<T>,
    want_input_grad: bool,
) -> Result<GradientSignal<T>> {
    let grads = conv2d_backward(&cache.conv, &cache.kernels, grad_out, want_input_grad)?;
    let filters = bank.collect_gradient(&grads.kernels)?;
    let n = bank.orientations();
    let bias: Vec<T> = grads.bias.chunks(n).map(|c| c.iter().copied().sum()).collect();
    Ok(GradientSignal {
        filters,
        bias: Tensor::new(&[bank.out_features()], bias)?,
        input: grads.input,
    })
}

fn batch_of_one<T: Scalar>(map: &OrientedFeatureMap<T>) -> Result<Tensor<T>> {
    let (c, n, h, w) = (map.features(), map.orientations(), map.height(), map.width());
    map.values().clone().reshape(&[1, c * n, h, w])
}

pub fn orconv_forward<T: Scalar>(
    bank: &ArfBank<T>,
    input: &OrientedFeatureMap<T>,
    padding: usize,
) -> Result<OrientedFeatureMap<T>> {
    if input.orientations() != bank.orientations() {
        return Err(Error::shape("orconv_forward", "orientation count N", bank.orientations(), input.orientations()));
    }
    if input.features() != bank.in_features() {
        return Err(Error::shape("orconv_forward", "input features C", bank.in_features(), input.features()));
    }
    let (out, _) = orconv_forward_batch(bank, &batch_of_one(input)?, padding)?;
    let s = out.shape().to_vec();
    OrientedFeatureMap::new(out.reshape(&[bank.out_features(), bank.orientations(), s[2], s[3]])?)
}

pub fn orconv_backward<T: Scalar>(
    bank: &ArfBank<T>,
    input: &OrientedFeatureMap<T>,
    upstream: &OrientedFeatureMap<T>,
    padding: usize,
) -> Result<GradientSignal<T>> {
    if input.orientations() != bank.orientations() || upstream.orientations() != bank.orientations() {
        return Err(Error::shape(
            "orconv_backward",
            "orientation count N",
            bank.orientations(),
            if input.orientations() != bank.orientations() { input.orientations() } else { upstream.orientations() },
        ));
    }
    if upstream.features() != bank.out_features() {
        return Err(Error::shape("orconv_backward", "upstream features C", bank.out_features(), upstream.features()));
    }
    let (_, cache) = orconv_forward_batch(bank, &batch_of_one(input)?, padding)?;
    let mut g = orconv_backward_batch(bank, &cache, &batch_of_one(upstream)?, true)?;
    g.input = match g.input {
        Some(t) => Some(t.reshape(input.values().shape())?),
        None => None,
    };
    Ok(g)
}
