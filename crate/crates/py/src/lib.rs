//! Python module `mtnet`: tensors, configuration, networks and training.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyIOError, PyValueError};
use pyo3::prelude::*;

use mtnet::autograd::Var;
use mtnet::checkpoint::Checkpoint;
use mtnet::config::TrainConfig;
use mtnet::network::{extract_luminance, MtNetwork, NetworkWidths, ScalePlan};
use mtnet::trainer::{ContentSource, Trainer};
use mtnet::{image_io, Error, Shape};

fn to_py(err: Error) -> PyErr {
    let msg = err.to_string();
    match err {
        Error::Config(_) | Error::Shape(_) | Error::UnknownLayer(_) => PyValueError::new_err(msg),
        Error::NonFinite { .. } | Error::Autodiff(_) => PyArithmeticError::new_err(msg),
        _ => PyIOError::new_err(msg),
    }
}

fn shape_of(dims: (usize, usize, usize, usize)) -> PyResult<Shape> {
    Shape::new(dims.0, dims.1, dims.2, dims.3).map_err(to_py)
}

/// Dense `(n, c, h, w)` float32 tensor.
#[pyclass(name = "Tensor", module = "mtnet", from_py_object)]
#[derive(Clone)]
pub struct PyTensor {
    inner: mtnet::Tensor<f32>,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: (usize, usize, usize, usize), data: Vec<f32>) -> PyResult<Self> {
        let inner = mtnet::Tensor::from_vec(shape_of(shape)?, data).map_err(to_py)?;
        Ok(PyTensor { inner })
    }

    #[staticmethod]
    fn zeros(shape: (usize, usize, usize, usize)) -> PyResult<Self> {
        Ok(PyTensor { inner: mtnet::Tensor::zeros(shape_of(shape)?) })
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize, usize) {
        let s = self.inner.shape();
        (s.n, s.c, s.h, s.w)
    }

    fn tolist(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn sum(&self) -> f64 {
        self.inner.data().iter().map(|&v| v as f64).sum()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor{}", self.inner.shape())
    }
}

impl From<mtnet::Tensor<f32>> for PyTensor {
    fn from(inner: mtnet::Tensor<f32>) -> Self {
        PyTensor { inner }
    }
}

/// Unnormalized Gram matrix per sample, shape `(n, 1, c, c)`.
#[pyfunction]
fn gram(x: &PyTensor) -> PyTensor {
    Var::constant(x.inner.clone()).gram().value().clone().into()
}

#[pyfunction]
fn bilinear_resize(x: &PyTensor, height: usize, width: usize) -> PyResult<PyTensor> {
    let v = Var::constant(x.inner.clone()).bilinear_resize(height, width).map_err(to_py)?;
    Ok(v.value().clone().into())
}

#[pyfunction]
#[pyo3(signature = (x, weight, bias=None, stride=1))]
fn conv2d(x: &PyTensor, weight: &PyTensor, bias: Option<&PyTensor>, stride: usize) -> PyResult<PyTensor> {
    let b = bias.map(|b| Var::constant(b.inner.clone()));
    let y = Var::constant(x.inner.clone())
        .conv2d(&Var::constant(weight.inner.clone()), b.as_ref(), stride)
        .map_err(to_py)?;
    Ok(y.value().clone().into())
}

#[pyfunction]
fn luminance(x: &PyTensor) -> PyResult<PyTensor> {
    Ok(extract_luminance(&Var::constant(x.inner.clone())).map_err(to_py)?.value().clone().into())
}

/// RGB image as a `(1, 3, h, w)` tensor in `[0, 1]`.
#[pyfunction]
fn decode_image(path: PathBuf) -> PyResult<PyTensor> {
    Ok(image_io::to_tensor(&image_io::decode_image(path).map_err(to_py)?).into())
}

#[pyfunction]
fn encode_image(x: &PyTensor, path: PathBuf) -> PyResult<()> {
    image_io::encode_image(&image_io::from_tensor(&x.inner).map_err(to_py)?, path).map_err(to_py)
}

/// Training configuration; built from `key=value` text.
#[pyclass(name = "TrainConfig", module = "mtnet", from_py_object)]
#[derive(Clone)]
pub struct PyTrainConfig {
    inner: TrainConfig,
}

#[pymethods]
impl PyTrainConfig {
    #[new]
    #[pyo3(signature = (text=""))]
    fn new(text: &str) -> PyResult<Self> {
        Ok(PyTrainConfig { inner: TrainConfig::from_kv(text).map_err(to_py)? })
    }

    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set(key, value).map_err(to_py)?;
        self.inner.validate().map_err(to_py)
    }

    fn to_kv(&self) -> String {
        self.inner.to_kv()
    }

    fn lr_at(&self, iteration: u64) -> f64 {
        self.inner.lr_at(iteration)
    }

    #[getter]
    fn iterations(&self) -> u64 {
        self.inner.iterations
    }

    #[getter]
    fn lambdas(&self) -> Vec<f64> {
        self.inner.lambdas.clone()
    }

    #[getter]
    fn train_scales(&self) -> Vec<usize> {
        self.inner.train_scales()
    }
}

/// The three-subnet stylization network.
#[pyclass(name = "Network", module = "mtnet")]
pub struct PyNetwork {
    inner: MtNetwork<f32>,
    iteration: u64,
    config: String,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (divisor=1, seed=0))]
    fn new(divisor: usize, seed: u64) -> PyResult<Self> {
        let widths = NetworkWidths::divided(divisor).map_err(to_py)?;
        Ok(PyNetwork { inner: MtNetwork::init(widths, seed).map_err(to_py)?, iteration: 0, config: String::new() })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let c = Checkpoint::load(path).map_err(to_py)?;
        Ok(PyNetwork { inner: c.network, iteration: c.iteration, config: c.config })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        let c = Checkpoint { iteration: self.iteration, config: self.config.clone(), network: self.inner.clone(), adam: None };
        c.save(path).map_err(to_py)
    }

    #[getter]
    fn scalar_count(&self) -> usize {
        self.inner.scalar_count()
    }

    #[getter]
    fn divisor(&self) -> usize {
        self.inner.widths.divisor
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.iteration
    }

    /// Test-mode outputs of the first `levels` subnets; `size` is the shorter
    /// side of the last level.
    #[pyo3(signature = (image, size=None, levels=3))]
    fn stylize(&self, py: Python<'_>, image: &PyTensor, size: Option<usize>, levels: usize) -> PyResult<Vec<PyTensor>> {
        let plan = match size {
            Some(s) => ScalePlan::test_with_final(s),
            None => ScalePlan::test(self.inner.widths.divisor),
        };
        let x = image.inner.clone();
        let net = &self.inner;
        let out = py.detach(|| net.stylize(&x, &plan, levels)).map_err(to_py)?;
        Ok(out.into_iter().map(PyTensor::from).collect())
    }
}

/// Hierarchical trainer over in-memory content images.
#[pyclass(name = "Trainer", module = "mtnet", unsendable)]
pub struct PyTrainer {
    inner: Trainer,
}

#[pymethods]
impl PyTrainer {
    #[new]
    fn new(config: &PyTrainConfig, styles: Vec<PyTensor>, contents: Vec<PyTensor>) -> PyResult<Self> {
        let styles: Vec<_> = styles.into_iter().map(|t| t.inner).collect();
        let contents = ContentSource::Images(contents.into_iter().map(|t| t.inner).collect());
        Ok(PyTrainer { inner: Trainer::new(config.inner.clone(), &styles, contents).map_err(to_py)? })
    }

    /// One iteration; returns `(lr, [L_S^1, L_S^2, L_S^3], L_H)`.
    fn step(&mut self) -> PyResult<(f64, Vec<f64>, f64)> {
        let r = self.inner.step().map_err(to_py)?;
        Ok((r.lr, r.levels, r.total))
    }

    #[getter]
    fn iteration(&self) -> u64 {
        self.inner.iteration
    }

    fn network(&self) -> PyNetwork {
        PyNetwork { inner: self.inner.network.clone(), iteration: self.inner.iteration, config: self.inner.config.to_kv() }
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        Checkpoint {
            iteration: self.inner.iteration,
            config: self.inner.config.to_kv(),
            network: self.inner.network.clone(),
            adam: Some(self.inner.adam.clone()),
        }
        .save(path)
        .map_err(to_py)
    }
}

#[pymodule(name = "mtnet")]
fn mtnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyTrainConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(gram, m)?)?;
    m.add_function(wrap_pyfunction!(bilinear_resize, m)?)?;
    m.add_function(wrap_pyfunction!(conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(luminance, m)?)?;
    m.add_function(wrap_pyfunction!(decode_image, m)?)?;
    m.add_function(wrap_pyfunction!(encode_image, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
