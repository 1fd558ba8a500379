//! Python bindings: filters, oriented convolution, encoders, networks and
//! dataset helpers. Arrays cross the boundary as flat lists plus a shape.

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use orn_core::arf::{self, RotationAngle};
use orn_core::dataset::{self, DatasetVariant};
use orn_core::encoding::{self, OrientedDescriptor};
use orn_core::error::Error;
use orn_core::network::{self, Checkpoint, NetworkSpec};
use orn_core::ops::softmax;
use orn_core::orconv::{self, ArfBank, OrientedFeatureMap};
use orn_core::Tensor;

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> PyResult<Tensor<f64>> {
    Tensor::new(shape, data).map_err(py_err)
}

/// A W×W×N active rotating filter.
#[pyclass(module = "orn", skip_from_py_object)]
#[derive(Clone)]
struct Arf {
    inner: arf::Arf<f64>,
}

#[pymethods]
impl Arf {
    /// `weights` is row-major `[W, W, N]`.
    #[new]
    fn new(weights: Vec<f64>, w: usize, n: usize) -> PyResult<Self> {
        let inner = arf::Arf::new(tensor(weights, &[w, w, n])?).map_err(py_err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn orientations(&self) -> usize {
        self.inner.orientations()
    }

    fn weights(&self) -> Vec<f64> {
        self.inner.weights().data().to_vec()
    }

    /// Clockwise rotation by `theta` radians via coordinate rotation and
    /// orientation spin.
    fn rotate_exact(&self, theta: f64) -> Self {
        Self {
            inner: arf::rotate_arf_exact(&self.inner, RotationAngle::from_radians(theta)),
        }
    }

    /// Rotation by `k` orientation steps through ring shifts (W = 1, or W = 3 with N = 8).
    fn rotate_fast(&self, k: i64) -> PyResult<Self> {
        Ok(Self {
            inner: arf::rotate_arf_fast(&self.inner, k).map_err(py_err)?,
        })
    }

    fn spin(&self, theta: f64) -> Self {
        Self {
            inner: arf::orientation_spin(&self.inner, RotationAngle::from_radians(theta)),
        }
    }

    fn __repr__(&self) -> String {
        format!("Arf(w={}, n={})", self.inner.width(), self.inner.orientations())
    }
}

/// Oriented response convolution of a `[C_in, N, H, W]` map with a
/// `[C_out, C_in, W, W, N]` filter bank. Returns `(values, shape)`.
#[pyfunction]
#[pyo3(signature = (filters, filter_shape, input, input_shape, padding=0, bias=None))]
fn orconv_forward(
    filters: Vec<f64>,
    filter_shape: Vec<usize>,
    input: Vec<f64>,
    input_shape: Vec<usize>,
    padding: usize,
    bias: Option<Vec<f64>>,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let bias = match bias {
        Some(b) => {
            let len = b.len();
            Some(tensor(b, &[len])?)
        }
        None => None,
    };
    let bank = ArfBank::new(tensor(filters, &filter_shape)?, bias).map_err(py_err)?;
    let map = OrientedFeatureMap::new(tensor(input, &input_shape)?).map_err(py_err)?;
    let out = orconv::orconv_forward(&bank, &map, padding).map_err(py_err)?;
    let shape = out.values().shape().to_vec();
    Ok((out.into_values().into_data(), shape))
}

fn descriptor(values: Vec<f64>, n: usize) -> PyResult<OrientedDescriptor<f64>> {
    if n == 0 || !values.len().is_multiple_of(n) {
        return Err(PyValueError::new_err(format!("{} values do not split into rows of {n}", values.len())));
    }
    let rows = values.len() / n;
    OrientedDescriptor::new(tensor(values, &[rows, n])?).map_err(py_err)
}

/// Rotates each length-`n` row so its dominant orientation comes first.
/// Returns `(aligned, dominant)`.
#[pyfunction]
fn oralign(values: Vec<f64>, n: usize) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let (out, dominant) = encoding::oralign(&descriptor(values, n)?).map_err(py_err)?;
    Ok((out.values().data().to_vec(), dominant))
}

/// Maximum of each length-`n` row.
#[pyfunction]
fn orpooling(values: Vec<f64>, n: usize) -> PyResult<Vec<f64>> {
    Ok(encoding::orpooling(&descriptor(values, n)?).0.into_data())
}

/// Clockwise bilinear rotation of an `h × w` image about its centre.
#[pyfunction]
fn rotate_image(pixels: Vec<f32>, h: usize, w: usize, theta: f64) -> PyResult<Vec<f32>> {
    if pixels.len() != h * w {
        return Err(PyValueError::new_err(format!("expected {} pixels, got {}", h * w, pixels.len())));
    }
    Ok(dataset::rotate_plane(&pixels, h, w, theta))
}

/// Declarative network topology.
#[pyclass(module = "orn", skip_from_py_object)]
#[derive(Clone)]
struct Spec {
    inner: NetworkSpec,
}

#[pymethods]
impl Spec {
    /// Parses the text form, e.g. `"input=1x28x28 orientations=8 | orconv(4,3,1) | ..."`.
    #[new]
    fn new(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: text.parse().map_err(py_err)?,
        })
    }

    /// One of the preset topologies: `baseline`, `orn4`, `orn8` with
    /// encoding `none`, `oralign` or `orpooling`.
    #[staticmethod]
    #[pyo3(signature = (network, encoding="none", dropout=0.5))]
    fn preset(network: &str, encoding: &str, dropout: f64) -> PyResult<Self> {
        let inner = NetworkSpec::preset(network.parse().map_err(py_err)?, encoding.parse().map_err(py_err)?, dropout)
            .map_err(py_err)?;
        Ok(Self { inner })
    }

    fn parameter_count(&self) -> PyResult<usize> {
        self.inner.parameter_count().map_err(py_err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn __str__(&self) -> String {
        self.inner.to_string()
    }

    fn __repr__(&self) -> String {
        format!("Spec('{}')", self.inner)
    }
}

/// A network with materialised parameters.
#[pyclass(module = "orn")]
struct Network {
    inner: network::Network<f32>,
}

#[pymethods]
impl Network {
    #[new]
    #[pyo3(signature = (spec, seed=0))]
    fn new(spec: &Spec, seed: u64) -> PyResult<Self> {
        Ok(Self {
            inner: network::Network::new(&spec.inner, seed).map_err(py_err)?,
        })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(path).map_err(py_err)?;
        Ok(Self {
            inner: ckpt.network().map_err(py_err)?,
        })
    }

    fn spec(&self) -> Spec {
        Spec {
            inner: self.inner.spec().clone(),
        }
    }

    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    /// Class probabilities for a batch of single-channel images given as a
    /// flat list of `batch · H · W` values in `[0, 1]`.
    fn predict(&self, images: Vec<f32>, batch: usize) -> PyResult<Vec<Vec<f32>>> {
        let (c, h, w) = self.inner.spec().input;
        let x = Tensor::new(&[batch, c, h, w], images).map_err(py_err)?;
        let probs = softmax(&self.inner.predict(&x).map_err(py_err)?).map_err(py_err)?;
        Ok(probs.data().chunks(self.inner.classes()).map(<[f32]>::to_vec).collect())
    }
}

/// Finite-difference gradient check of `spec` in 64-bit precision.
/// Returns `(passed, max_relative_error)`.
#[pyfunction]
#[pyo3(signature = (spec, tolerance=1e-5))]
fn gradcheck(spec: &Spec, tolerance: f64) -> PyResult<(bool, f64)> {
    let report = network::gradcheck_network(&spec.inner, tolerance).map_err(py_err)?;
    Ok((report.passed(), report.max_rel_error()))
}

type IdxArrays = (Vec<f32>, (usize, usize, usize), Vec<u8>);

/// Loads an IDX image/label pair. Returns `(pixels, (n, h, w), labels)`
/// with pixels scaled to `[0, 1]`.
#[pyfunction]
fn load_idx(images: &str, labels: &str) -> PyResult<IdxArrays> {
    let set = dataset::load_idx(images, labels).map_err(py_err)?;
    let shape = (set.len(), set.height(), set.width());
    Ok((set.images.into_data(), shape, set.labels))
}

/// Builds the training and test splits of a dataset variant from the raw
/// MNIST files in `data_dir` and writes them to `out`. Returns the written
/// file paths with their SHA-256 digests.
#[pyfunction]
#[pyo3(signature = (data_dir, variant, out, seed=0, limit=None))]
fn build_data(data_dir: &str, variant: &str, out: &str, seed: u64, limit: Option<usize>) -> PyResult<Vec<(String, String)>> {
    let variant: DatasetVariant = variant.parse().map_err(py_err)?;
    let written = orn_core::experiment::build_data(data_dir.as_ref(), variant, seed, out.as_ref(), limit).map_err(py_err)?;
    Ok(written
        .into_iter()
        .flat_map(|w| {
            [
                (w.images.display().to_string(), w.images_sha256),
                (w.labels.display().to_string(), w.labels_sha256),
            ]
        })
        .collect())
}

#[pymodule]
fn orn(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Arf>()?;
    m.add_class::<Spec>()?;
    m.add_class::<Network>()?;
    m.add_function(wrap_pyfunction!(orconv_forward, m)?)?;
    m.add_function(wrap_pyfunction!(oralign, m)?)?;
    m.add_function(wrap_pyfunction!(orpooling, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_image, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(load_idx, m)?)?;
    m.add_function(wrap_pyfunction!(build_data, m)?)?;
    Ok(())
}
