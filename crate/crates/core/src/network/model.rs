use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::spec::{LayerSpec, NetworkSpec, Shape};
use crate::encoding::{dominant_orientation, oralign_rows, oralign_rows_backward};
use crate::error::{Error, Result};
use crate::ops::{
    conv2d_backward, conv2d_forward, global_maxpool_forward, linear_backward, linear_forward, maxpool2_forward,
    pool_backward, relu, relu_backward, ConvCache, Dropout, PoolIndices,
};
use crate::orconv::{extend_batch, extend_batch_backward, orconv_backward_batch, orconv_forward_batch, ArfBank, OrConvCache};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone)]
enum Layer<T> {
    Conv { kernels: Tensor<T>, bias: Tensor<T>, padding: usize },
    /// `lift` is set when the layer receives an unoriented map.
    OrConv { bank: ArfBank<T>, padding: usize, lift: bool },
    MaxPool,
    GlobalMaxPool,
    Relu,
    Dropout(Dropout),
    Linear { weight: Tensor<T>, bias: Tensor<T> },
    OrAlign { n: usize },
    OrPooling { n: usize },
    Output,
}

#[derive(Debug, Clone)]
enum Cache<T> {
    Conv(ConvCache<T>),
    OrConv(OrConvCache<T>),
    Pool(PoolIndices),
    Relu(Tensor<T>),
    Dropout(Option<Vec<T>>),
    Linear { input: Tensor<T>, shape: Vec<usize> },
    OrAlign { dominant: Vec<usize> },
    OrPooling { argmax: Vec<usize>, shape: Vec<usize> },
    Output,
}

/// Result of a forward pass with everything the backward pass needs.
#[derive(Debug, Clone)]
pub struct ForwardPass<T> {
    /// `[B, classes]` pre-softmax scores.
    pub logits: Tensor<T>,
    caches: Vec<Cache<T>>,
}

impl<T: Scalar> ForwardPass<T> {
    /// Every discrete choice made by the pass (pool winners, ReLU signs,
    /// dominant orientations). Two passes with equal signatures are on the
    /// same smooth piece of the network function.
    pub fn decision_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for c in &self.caches {
            match c {
                Cache::Pool(p) => sig.extend(&p.argmax),
                Cache::Relu(out) => sig.extend(out.data().iter().map(|&x| (x > T::zero()) as usize)),
                Cache::OrAlign { dominant } => sig.extend(dominant),
                Cache::OrPooling { argmax, .. } => sig.extend(argmax),
                _ => {}
            }
        }
        sig
    }
}

/// An instantiated network whose parameters can be trained.
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    plan: Vec<Shape>,
    layers: Vec<Layer<T>>,
}

fn uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let a = 1.0 / (fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| T::of((rng.random::<f64>() * 2.0 - 1.0) * a))
}

impl<T: Scalar> Network<T> {
    /// Builds the layers of `spec` with weights drawn uniformly from
    /// `±1/√fan_in` (fan-in counts `W·W·N·C_in` for ORConv) and zero biases.
    pub fn new(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let plan = spec.plan()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let big_n = spec.orientations;
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (i, layer) in spec.layers.iter().enumerate() {
            let input = spec.input_shape(&plan, i);
            layers.push(match (*layer, input) {
                (LayerSpec::Conv { out, kernel, padding }, Shape::Map { c, .. }) => Layer::Conv {
                    kernels: uniform(&[out, c, kernel, kernel], c * kernel * kernel, &mut rng),
                    bias: Tensor::zeros(&[out]),
                    padding,
                },
                (LayerSpec::OrConv { out, kernel, padding }, Shape::Map { c, n, .. }) => {
                    let filters = uniform(&[out, c, kernel, kernel, big_n], kernel * kernel * big_n * c, &mut rng);
                    Layer::OrConv {
                        bank: ArfBank::new(filters, Some(Tensor::zeros(&[out])))?,
                        padding,
                        lift: n == 1 && big_n > 1,
                    }
                }
                (LayerSpec::Linear { out }, s) => Layer::Linear {
                    weight: uniform(&[out, s.len()], s.len(), &mut rng),
                    bias: Tensor::zeros(&[out]),
                },
                (LayerSpec::MaxPool, _) => Layer::MaxPool,
                (LayerSpec::GlobalMaxPool, _) => Layer::GlobalMaxPool,
                (LayerSpec::Relu, _) => Layer::Relu,
                (LayerSpec::Dropout { rate }, _) => Layer::Dropout(Dropout::new(rate)?),
                (LayerSpec::OrAlign, _) => Layer::OrAlign { n: big_n },
                (LayerSpec::OrPooling, _) => Layer::OrPooling { n: big_n },
                (LayerSpec::SoftmaxOutput, _) => Layer::Output,
                (l, s) => {
                    return Err(Error::Topology {
                        index: i,
                        layer: l.to_string(),
                        msg: format!("cannot be built on a {s:?} input"),
                    })
                }
            });
        }
        Ok(Self {
            spec: spec.clone(),
            plan,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    /// Output shape of every layer.
    pub fn plan(&self) -> &[Shape] {
        &self.plan
    }

    pub fn classes(&self) -> usize {
        self.spec.classes()
    }

    /// Sets the rate of every dropout layer.
    pub fn set_dropout(&mut self, rate: f64) -> Result<()> {
        let d = Dropout::new(rate)?;
        for l in &mut self.layers {
            if let Layer::Dropout(old) = l {
                *old = d;
            }
        }
        self.spec = self.spec.with_dropout(rate);
        Ok(())
    }

    /// Named parameter tensors in a fixed order (`layer<i>.weight`,
    /// `layer<i>.bias`).
    pub fn parameters(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                Layer::Conv { kernels, bias, .. } => {
                    out.push((format!("layer{i}.weight"), kernels));
                    out.push((format!("layer{i}.bias"), bias));
                }
                Layer::OrConv { bank, .. } => {
                    out.push((format!("layer{i}.weight"), bank.filters()));
                    out.push((format!("layer{i}.bias"), bank.bias()));
                }
                Layer::Linear { weight, bias } => {
                    out.push((format!("layer{i}.weight"), weight));
                    out.push((format!("layer{i}.bias"), bias));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable views in the order of [`Network::parameters`].
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            match l {
                Layer::Conv { kernels, bias, .. } => {
                    out.push(kernels);
                    out.push(bias);
                }
                Layer::OrConv { bank, .. } => {
                    let (f, b) = bank.parameters_mut();
                    out.push(f);
                    out.push(b);
                }
                Layer::Linear { weight, bias } => {
                    out.push(weight);
                    out.push(bias);
                }
                _ => {}
            }
        }
        out
    }

    /// Materialised parameters actually held by the layers.
    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, t)| t.len()).sum()
    }

    /// Layer index owning each entry of [`Network::parameters`].
    pub fn parameter_layers(&self) -> Vec<usize> {
        self.parameters()
            .iter()
            .map(|(name, _)| name["layer".len()..name.find('.').unwrap()].parse().unwrap())
            .collect()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.spec.input;
        if input.rank() != 4 || input.shape()[1..] != [c, h, w] {
            return Err(Error::invalid(
                "network forward",
                format!("expected input [B, {c}, {h}, {w}], got {:?}", input.shape()),
            ));
        }
        Ok(())
    }

    fn layer_forward<R: Rng>(
        &self,
        layer: &Layer<T>,
        x: Tensor<T>,
        train: bool,
        rng: &mut R,
    ) -> Result<(Tensor<T>, Cache<T>)> {
        let batch = x.shape()[0];
        Ok(match layer {
            Layer::Conv { kernels, bias, padding } => {
                let (y, c) = conv2d_forward(&x, kernels, Some(bias.data()), *padding)?;
                (y, Cache::Conv(c))
            }
            Layer::OrConv { bank, padding, lift } => {
                let x = if *lift { extend_batch(&x, bank.orientations())? } else { x };
                let (y, c) = orconv_forward_batch(bank, &x, *padding)?;
                (y, Cache::OrConv(c))
            }
            Layer::MaxPool => {
                let (y, p) = maxpool2_forward(&x)?;
                (y, Cache::Pool(p))
            }
            Layer::GlobalMaxPool => {
                let (y, p) = global_maxpool_forward(&x)?;
                (y, Cache::Pool(p))
            }
            Layer::Relu => {
                let y = relu(&x);
                (y.clone(), Cache::Relu(y))
            }
            Layer::Dropout(d) => {
                let (y, mask) = d.forward(&x, train, rng);
                (y, Cache::Dropout(mask))
            }
            Layer::Linear { weight, bias } => {
                let shape = x.shape().to_vec();
                let flat = x.reshape(&[batch, shape[1..].iter().product()])?;
                let y = linear_forward(&flat, weight, bias.data())?;
                (y, Cache::Linear { input: flat, shape })
            }
            Layer::OrAlign { n } => {
                let mut out = vec![T::zero(); x.len()];
                let dominant = oralign_rows(x.data(), *n, &mut out);
                (Tensor::new(x.shape(), out)?, Cache::OrAlign { dominant })
            }
            Layer::OrPooling { n } => {
                let s = x.shape().to_vec();
                let mut values = Vec::with_capacity(x.len() / n);
                let mut argmax = Vec::with_capacity(x.len() / n);
                for v in x.data().chunks(*n) {
                    let d = dominant_orientation(v);
                    values.push(v[d]);
                    argmax.push(d);
                }
                (Tensor::new(&[s[0], s[1] / n, s[2], s[3]], values)?, Cache::OrPooling { argmax, shape: s })
            }
            Layer::Output => (x, Cache::Output),
        })
    }

    /// Forward pass over a batch `[B, C, H, W]`. Dropout is active only when
    /// `train` is set and draws from `rng`.
    pub fn forward<R: Rng>(&self, input: &Tensor<T>, train: bool, rng: &mut R) -> Result<ForwardPass<T>> {
        self.check_input(input)?;
        let mut x = input.clone();
        let mut caches = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, c) = self.layer_forward(layer, x, train, rng)?;
            caches.push(c);
            x = y;
        }
        Ok(ForwardPass { logits: x, caches })
    }

    /// Evaluation-mode logits.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.layer_forward(layer, x, false, &mut rng)?.0;
        }
        Ok(x)
    }

    /// Evaluation-mode output of every layer, in layer order.
    pub fn trace(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(input)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut x = input.clone();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            x = self.layer_forward(layer, x, false, &mut rng)?.0;
            out.push(x.clone());
        }
        Ok(out)
    }

    /// Back-propagates `grad_logits` (`∂loss/∂logits`) and returns parameter
    /// gradients in the order of [`Network::parameters`].
    pub fn backward(&self, pass: &ForwardPass<T>, grad_logits: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        if grad_logits.shape() != pass.logits.shape() {
            return Err(Error::shape(
                "network backward",
                "upstream length",
                pass.logits.len(),
                grad_logits.len(),
            ));
        }
        let first = self
            .spec
            .layers
            .iter()
            .position(LayerSpec::has_parameters)
            .unwrap_or(self.layers.len());
        let mut grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); self.layers.len()];
        let mut g = grad_logits.clone();
        for i in (first..self.layers.len()).rev() {
            let want_input = i > first;
            g = match (&self.layers[i], &pass.caches[i]) {
                (Layer::Conv { kernels, .. }, Cache::Conv(c)) => {
                    let r = conv2d_backward(c, kernels, &g, want_input)?;
                    let n = r.bias.len();
                    grads[i] = vec![r.kernels, Tensor::new(&[n], r.bias)?];
                    match r.input {
                        Some(t) => t,
                        None => break,
                    }
                }
                (Layer::OrConv { bank, lift, .. }, Cache::OrConv(c)) => {
                    let r = orconv_backward_batch(bank, c, &g, want_input)?;
                    grads[i] = vec![r.filters, r.bias];
                    match r.input {
                        Some(t) if *lift => extend_batch_backward(&t, bank.orientations())?,
                        Some(t) => t,
                        None => break,
                    }
                }
                (Layer::MaxPool | Layer::GlobalMaxPool, Cache::Pool(p)) => pool_backward(p, &g)?,
                (Layer::Relu, Cache::Relu(y)) => relu_backward(y, &g)?,
                (Layer::Dropout(_), Cache::Dropout(mask)) => Dropout::backward(mask.as_deref(), &g)?,
                (Layer::Linear { weight, .. }, Cache::Linear { input, shape }) => {
                    let r = linear_backward(input, weight, &g)?;
                    let n = r.bias.len();
                    grads[i] = vec![r.weight, Tensor::new(&[n], r.bias)?];
                    r.input.reshape(shape)?
                }
                (Layer::OrAlign { n }, Cache::OrAlign { dominant }) => {
                    let mut out = vec![T::zero(); g.len()];
                    oralign_rows_backward(g.data(), *n, dominant, &mut out);
                    Tensor::new(g.shape(), out)?
                }
                (Layer::OrPooling { n }, Cache::OrPooling { argmax, shape }) => {
                    let mut out = vec![T::zero(); g.len() * n];
                    for (j, (&v, &d)) in g.data().iter().zip(argmax).enumerate() {
                        out[j * n + d] = v;
                    }
                    Tensor::new(shape, out)?
                }
                (Layer::Output, Cache::Output) => g,
                _ => unreachable!("cache recorded by the same layer"),
            };
        }
        Ok(grads.into_iter().flatten().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::spec::Encoding;
    use crate::ops::softmax_cross_entropy;

    fn tiny(n: usize, enc: LayerSpec) -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec::new(
            (1, 8, 8),
            n,
            vec![
                OrConv { out: 2, kernel: 3, padding: 1 },
                Relu,
                MaxPool,
                OrConv { out: 3, kernel: 3, padding: 1 },
                GlobalMaxPool,
                enc,
                Linear { out: 4 },
                SoftmaxOutput,
            ],
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_matches_closed_form() {
        for spec in [
            NetworkSpec::baseline(0.5),
            NetworkSpec::orn(8, Encoding::OrAlign, 0.5).unwrap(),
            NetworkSpec::orn(4, Encoding::OrPooling, 0.5).unwrap(),
            tiny(8, LayerSpec::OrAlign),
        ] {
            let net = Network::<f32>::new(&spec, 1).unwrap();
            assert_eq!(net.parameter_count(), spec.parameter_count().unwrap());
        }
    }

    #[test]
    fn initialisation_is_seeded_and_bounded() {
        let spec = tiny(8, LayerSpec::OrAlign);
        let a = Network::<f64>::new(&spec, 3).unwrap();
        let b = Network::<f64>::new(&spec, 3).unwrap();
        let c = Network::<f64>::new(&spec, 4).unwrap();
        assert_eq!(a.parameters(), b.parameters());
        assert_ne!(a.parameters(), c.parameters());
        let (_, w0) = &a.parameters()[0];
        let bound = 1.0 / (3.0 * 3.0 * 8.0f64).sqrt();
        assert!(w0.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn forward_shapes_and_batch_independence() {
        let spec = tiny(4, LayerSpec::OrPooling);
        let net = Network::<f64>::new(&spec, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[3, 1, 8, 8], |i| ((i[0] * 64 + i[2] * 8 + i[3]) as f64 * 0.37).sin());
        let y = net.predict(&x).unwrap();
        assert_eq!(y.shape(), &[3, 4]);
        let one = Tensor::new(&[1, 1, 8, 8], x.data()[64..128].to_vec()).unwrap();
        let y1 = net.predict(&one).unwrap();
        for k in 0..4 {
            assert!((y.get(&[1, k]) - y1.get(&[0, k])).abs() < 1e-12);
        }
        assert!(net.forward(&Tensor::zeros(&[1, 1, 7, 8]), false, &mut rng).is_err());
    }

    #[test]
    fn backward_gradient_layout() {
        let spec = tiny(8, LayerSpec::OrAlign);
        let net = Network::<f64>::new(&spec, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[2, 1, 8, 8], |i| ((i[2] * 8 + i[3] + i[0]) as f64 * 0.11).cos());
        let pass = net.forward(&x, true, &mut rng).unwrap();
        let (_, g, _) = softmax_cross_entropy(&pass.logits, &[1, 3]).unwrap();
        let grads = net.backward(&pass, &g).unwrap();
        let params = net.parameters();
        assert_eq!(grads.len(), params.len());
        for (gr, (_, p)) in grads.iter().zip(&params) {
            assert_eq!(gr.shape(), p.shape());
        }
        assert_eq!(net.parameter_layers(), vec![0, 0, 3, 3, 6, 6]);
    }
}
