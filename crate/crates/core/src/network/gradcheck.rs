//! Finite-difference oracle for every parameter of a small network.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::model::{ForwardPass, Network};
use super::spec::{LayerSpec, NetworkSpec};
use crate::error::{Error, Result};
use crate::ops::softmax_cross_entropy;
use crate::tensor::Tensor;

/// Central-difference step.
pub const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-4;
const MAX_EXTENT: usize = 8;
const MAX_PARAMETRIC_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradcheck {
    pub index: usize,
    pub layer: String,
    pub checked: usize,
    /// Coordinates whose perturbation changed a discrete decision (pool
    /// winner, ReLU sign, dominant orientation) and so have no derivative
    /// to compare against.
    pub skipped: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckFailure {
    pub parameter: String,
    pub coordinate: Vec<usize>,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub layers: Vec<LayerGradcheck>,
    pub failures: Vec<GradcheckFailure>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.layers.iter().all(|l| l.checked > 0)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.layers {
            writeln!(
                f,
                "layer {:>2} {:<16} checked {:>5}  skipped {:>3}  max rel error {:.3e}",
                l.index, l.layer, l.checked, l.skipped, l.max_rel_error
            )?;
        }
        for fl in &self.failures {
            writeln!(
                f,
                "FAIL {}{:?}: analytic {:.9e} numeric {:.9e} rel {:.3e}",
                fl.parameter, fl.coordinate, fl.analytic, fl.numeric, fl.rel_error
            )?;
        }
        write!(
            f,
            "{} (tolerance {:.1e}, max rel error {:.3e})",
            if self.passed() { "PASS" } else { "FAIL" },
            self.tolerance,
            self.max_rel_error()
        )
    }
}

/// `|a − n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn unravel(mut flat: usize, shape: &[usize]) -> Vec<usize> {
    let mut idx = vec![0; shape.len()];
    for (axis, &d) in shape.iter().enumerate().rev() {
        idx[axis] = flat % d;
        flat /= d;
    }
    idx
}

/// [`gradcheck_with`] on a batch of two random inputs drawn from seed 0.
pub fn gradcheck_network(spec: &NetworkSpec, tolerance: f64) -> Result<GradcheckReport> {
    gradcheck_with(spec, tolerance, 0, 2)
}

/// Compares every parameter's back-propagated gradient of the mean
/// cross-entropy with a 64-bit central difference. Dropout is disabled.
pub fn gradcheck_with(spec: &NetworkSpec, tolerance: f64, seed: u64, batch: usize) -> Result<GradcheckReport> {
    let (c, h, w) = spec.input;
    if h > MAX_EXTENT || w > MAX_EXTENT {
        return Err(Error::invalid("gradcheck", format!("input {h}×{w} exceeds {MAX_EXTENT}×{MAX_EXTENT}")));
    }
    let parametric = spec.layers.iter().filter(|l| l.has_parameters()).count();
    if parametric > MAX_PARAMETRIC_LAYERS {
        return Err(Error::invalid(
            "gradcheck",
            format!("{parametric} parametric layers, at most {MAX_PARAMETRIC_LAYERS} supported"),
        ));
    }
    let mut net = Network::<f64>::new(spec, seed)?;
    net.set_dropout(0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Random biases so that no unit sits exactly on a ReLU kink.
    for p in net.parameters_mut() {
        if p.rank() == 1 {
            for b in p.data_mut() {
                *b = rng.random::<f64>() * 0.2 - 0.1;
            }
        }
    }
    let x = Tensor::from_fn(&[batch.max(1), c, h, w], |_| rng.random::<f64>() * 2.0 - 1.0);
    let classes = net.classes();
    let labels: Vec<usize> = (0..batch.max(1)).map(|_| rng.random_range(0..classes)).collect();

    let eval = |n: &Network<f64>| -> Result<(f64, ForwardPass<f64>)> {
        let mut r = ChaCha8Rng::seed_from_u64(0);
        let pass = n.forward(&x, false, &mut r)?;
        let (loss, _, _) = softmax_cross_entropy(&pass.logits, &labels)?;
        Ok((loss, pass))
    };
    let (_, pass) = eval(&net)?;
    let base_sig = pass.decision_signature();
    let (_, grad, _) = softmax_cross_entropy(&pass.logits, &labels)?;
    let analytic = net.backward(&pass, &grad)?;

    let names: Vec<(String, Vec<usize>)> = net.parameters().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let owners = net.parameter_layers();
    let mut layers: Vec<LayerGradcheck> = Vec::new();
    let mut failures = Vec::new();
    for (p, ((name, shape), owner)) in names.iter().zip(&owners).enumerate() {
        if layers.last().is_none_or(|l| l.index != *owner) {
            layers.push(LayerGradcheck {
                index: *owner,
                layer: spec.layers[*owner].to_string(),
                checked: 0,
                skipped: 0,
                max_rel_error: 0.0,
            });
        }
        let report = layers.last_mut().unwrap();
        for i in 0..analytic[p].len() {
            let orig = net.parameters()[p].1.data()[i];
            net.parameters_mut()[p].data_mut()[i] = orig + STEP;
            let (lp, pp) = eval(&net)?;
            net.parameters_mut()[p].data_mut()[i] = orig - STEP;
            let (lm, pm) = eval(&net)?;
            net.parameters_mut()[p].data_mut()[i] = orig;
            if pp.decision_signature() != base_sig || pm.decision_signature() != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * STEP);
            let a = analytic[p].data()[i];
            let rel = relative_error(a, numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > tolerance {
                failures.push(GradcheckFailure {
                    parameter: name.clone(),
                    coordinate: unravel(i, shape),
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(GradcheckReport {
        tolerance,
        layers,
        failures,
    })
}

/// Small networks covering every trainable layer type, used by the CLI and
/// the test suites.
pub fn tiny_specs() -> Vec<(&'static str, NetworkSpec)> {
    use LayerSpec::*;
    let head = |mut v: Vec<LayerSpec>| {
        v.extend([Linear { out: 3 }, SoftmaxOutput]);
        v
    };
    let orn = |w: usize, n: usize, enc: LayerSpec| {
        NetworkSpec::new((1, w, w), n, head(vec![OrConv { out: 2, kernel: w, padding: 0 }, enc])).unwrap()
    };
    vec![
        (
            "conv",
            NetworkSpec::new((2, 6, 6), 1, head(vec![Conv { out: 3, kernel: 3, padding: 1 }, Relu, MaxPool])).unwrap(),
        ),
        ("orconv-1x1x4-oralign", orn(1, 4, OrAlign)),
        ("orconv-1x1x8-orpooling", orn(1, 8, OrPooling)),
        ("orconv-3x3x8-oralign", orn(3, 8, OrAlign)),
        ("orconv-3x3x8-orpooling", orn(3, 8, OrPooling)),
        ("orconv-5x5x8-oralign", orn(5, 8, OrAlign)),
        (
            "orconv-3x3x4-stack",
            NetworkSpec::new(
                (1, 6, 6),
                4,
                head(vec![
                    OrConv { out: 2, kernel: 3, padding: 1 },
                    Relu,
                    OrConv { out: 2, kernel: 3, padding: 0 },
                    GlobalMaxPool,
                    OrAlign,
                ]),
            )
            .unwrap(),
        ),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_networks_pass() {
        for (name, spec) in tiny_specs() {
            let r = gradcheck_network(&spec, 1e-5).unwrap();
            assert!(r.passed(), "{name}\n{r}");
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert!(relative_error(1.0, 1.001) > 1e-5);
        assert!(relative_error(1e-9, 0.0) < 1e-4);
        assert_eq!(relative_error(-2.0, -2.0), 0.0);
    }

    #[test]
    fn oversized_specs_rejected() {
        let spec = NetworkSpec::baseline(0.5);
        assert!(gradcheck_network(&spec, 1e-5).is_err());
    }
}
