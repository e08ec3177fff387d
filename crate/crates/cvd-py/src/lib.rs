//! Python bindings: the tape, the model, the losses, and the dataset and
//! metric helpers, glued together with plain lists (no numpy dependency).

use std::path::PathBuf;
use std::rc::Rc;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use cvd::cli::config::RunConfig;
use cvd::cli::train::run_train;
use cvd::error::CvdError;
use cvd::model::{CvdConfig, CvdModel, View};
use cvd::synthdata;
use cvd::tensor;

fn err(e: CvdError) -> PyErr {
    match e {
        CvdError::Io(io) => PyIOError::new_err(io.to_string()),
        other => PyValueError::new_err(other.to_string()),
    }
}

#[pyclass(unsendable)]
struct Graph {
    inner: Rc<tensor::Graph>,
}

#[pymethods]
impl Graph {
    #[new]
    #[pyo3(signature = (seed = 0))]
    fn new(seed: u64) -> Graph {
        Graph {
            inner: tensor::Graph::new(seed),
        }
    }

    #[pyo3(signature = (data, shape, requires_grad = false))]
    fn tensor(&self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self
                .inner
                .tensor(data, &shape, requires_grad)
                .map_err(err)?,
        })
    }

    fn scalar(&self, v: f64) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.scalar(v).map_err(err)?,
        })
    }

    /// Mark everything pushed so far as persistent across resets.
    fn freeze(&self) {
        self.inner.freeze();
    }

    /// Drop all nodes above the freeze watermark.
    fn reset(&self) {
        self.inner.reset();
    }

    fn zero_grads(&self) {
        self.inner.zero_grads();
    }

    /// Rewind the graph rng to its seeded state.
    fn reseed_rng(&self) {
        self.inner.reseed_rng();
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

#[pyclass(unsendable)]
struct Tensor {
    inner: tensor::Tensor,
}

impl Tensor {
    fn wrap(r: cvd::error::Result<tensor::Tensor>) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: r.map_err(err)?,
        })
    }
}

#[pymethods]
impl Tensor {
    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn requires_grad(&self) -> bool {
        self.inner.requires_grad()
    }

    fn data(&self) -> Vec<f64> {
        self.inner.data()
    }

    fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad()
    }

    fn item(&self) -> f64 {
        self.inner.item()
    }

    fn neg(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.neg())
    }

    fn exp(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.exp())
    }

    fn log(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.log())
    }

    fn sqrt(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.sqrt())
    }

    fn square(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.square())
    }

    fn relu(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.relu())
    }

    fn sigmoid(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.sigmoid())
    }

    fn sum_all(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.sum_all())
    }

    fn mean_all(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.mean_all())
    }

    fn mean_spatial(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.mean_spatial())
    }

    fn l2_normalize_rows(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.l2_normalize_rows())
    }

    fn transpose2(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.transpose2())
    }

    fn logsumexp_rows(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.logsumexp_rows())
    }

    fn diag(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.diag())
    }

    fn upsample2x(&self) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.upsample2x())
    }

    fn add(&self, other: &Tensor) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.add(&other.inner))
    }

    fn sub(&self, other: &Tensor) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.sub(&other.inner))
    }

    fn mul(&self, other: &Tensor) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.mul(&other.inner))
    }

    fn div(&self, other: &Tensor) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.div(&other.inner))
    }

    fn matmul(&self, other: &Tensor) -> PyResult<Tensor> {
        Tensor::wrap(self.inner.matmul(&other.inner))
    }

    fn add_scalar(&self, c: f64) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.add_scalar(c).map_err(err)?,
        })
    }

    fn mul_scalar(&self, c: f64) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.mul_scalar(c).map_err(err)?,
        })
    }

    #[pyo3(signature = (kernel, stride = 1, pad = 1))]
    fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.conv2d(&kernel.inner, stride, pad).map_err(err)?,
        })
    }

    fn reshape(&self, shape: Vec<usize>) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.reshape(&shape).map_err(err)?,
        })
    }

    /// Run the backward pass from this (scalar) tensor.
    fn backward(&self) -> PyResult<()> {
        self.inner.backward().map_err(err)
    }

    fn __add__(&self, other: &Tensor) -> PyResult<Tensor> {
        self.add(other)
    }

    fn __sub__(&self, other: &Tensor) -> PyResult<Tensor> {
        self.sub(other)
    }

    fn __mul__(&self, other: &Tensor) -> PyResult<Tensor> {
        self.mul(other)
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn parse_view(view: &str) -> PyResult<View> {
    match view {
        "drone" => Ok(View::Drone),
        "satellite" => Ok(View::Satellite),
        _ => Err(PyValueError::new_err(format!(
            "view must be 'drone' or 'satellite', got '{view}'"
        ))),
    }
}

#[pyclass(unsendable)]
struct Model {
    inner: CvdModel,
}

#[pymethods]
impl Model {
    #[new]
    #[pyo3(signature = (image_size = 32, channels = 1, d = 64, alpha = 0.5, squeeze = true, share_encoder = true, tau = 0.05, lambda1 = 10.0, lambda2 = 0.2, n_projections = 64, bi_infonce = false, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        image_size: usize,
        channels: usize,
        d: usize,
        alpha: f64,
        squeeze: bool,
        share_encoder: bool,
        tau: f64,
        lambda1: f64,
        lambda2: f64,
        n_projections: usize,
        bi_infonce: bool,
        seed: u64,
    ) -> PyResult<Model> {
        let cfg = CvdConfig {
            image_size,
            channels,
            d,
            alpha,
            squeeze,
            share_encoder,
            tau,
            lambda1,
            lambda2,
            n_projections,
            bi_infonce,
            seed,
        };
        Ok(Model {
            inner: CvdModel::new(cfg).map_err(err)?,
        })
    }

    /// The tape all model tensors live on; build inputs here.
    fn graph(&self) -> Graph {
        Graph {
            inner: self.inner.graph().clone(),
        }
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.param_names()
    }

    fn n_params(&self) -> usize {
        self.inner.n_params()
    }

    fn encode(&self, image: &Tensor, view: &str) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self
                .inner
                .encode(&image.inner, parse_view(view)?)
                .map_err(err)?,
        })
    }

    fn disentangle(&self, z: &Tensor, view: &str) -> PyResult<(Tensor, Tensor)> {
        let (c, v) = self
            .inner
            .disentangle(&z.inner, parse_view(view)?)
            .map_err(err)?;
        Ok((Tensor { inner: c }, Tensor { inner: v }))
    }

    fn pool_content(&self, z_c: &Tensor) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self.inner.pool_content(&z_c.inner).map_err(err)?,
        })
    }

    fn cross_reconstruct(&self, zc_other: &Tensor, zv_own: &Tensor, view: &str) -> PyResult<Tensor> {
        Ok(Tensor {
            inner: self
                .inner
                .cross_reconstruct(&zc_other.inner, &zv_own.inner, parse_view(view)?)
                .map_err(err)?,
        })
    }

    /// Full pipeline; returns a dict of factors and reconstructions.
    fn forward_pair<'py>(
        &self,
        py: Python<'py>,
        drone: &Tensor,
        satellite: &Tensor,
    ) -> PyResult<Bound<'py, PyDict>> {
        let fwd = self
            .inner
            .forward_pair(&drone.inner, &satellite.inner)
            .map_err(err)?;
        let out = PyDict::new(py);
        let f = fwd.factors;
        for (name, t) in [
            ("z_d", f.z_d),
            ("z_s", f.z_s),
            ("zc_d", f.zc_d),
            ("zc_s", f.zc_s),
            ("zv_d", f.zv_d),
            ("zv_s", f.zv_s),
            ("pooled_c_d", f.pooled_c_d),
            ("pooled_c_s", f.pooled_c_s),
            ("recon_d", fwd.recon_d),
            ("recon_s", fwd.recon_s),
        ] {
            out.set_item(name, Tensor { inner: t })?;
        }
        Ok(out)
    }
}

#[pyfunction]
fn sliced_w2(p: &Tensor, q: &Tensor, k: usize) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: cvd::losses::sliced_w2(&p.inner, &q.inner, k).map_err(err)?,
    })
}

#[pyfunction]
fn loss_iic(z_c: &Tensor, z_v: &Tensor, k: usize) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: cvd::losses::loss_iic(&z_c.inner, &z_v.inner, k).map_err(err)?,
    })
}

#[pyfunction]
fn loss_irc(original: &Tensor, reconstructed: &Tensor) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: cvd::losses::loss_irc(&original.inner, &reconstructed.inner).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (c_d, c_s, tau = 0.05, bi = false))]
fn loss_infonce(c_d: &Tensor, c_s: &Tensor, tau: f64, bi: bool) -> PyResult<Tensor> {
    Ok(Tensor {
        inner: cvd::losses::loss_infonce(&c_d.inner, &c_s.inner, tau, bi).map_err(err)?,
    })
}

#[pyfunction]
#[pyo3(signature = (scenes, views, size, seed, out))]
fn generate_dataset(scenes: usize, views: usize, size: usize, seed: u64, out: PathBuf) -> PyResult<usize> {
    let ds = synthdata::generate_dataset(scenes, views, size, seed).map_err(err)?;
    synthdata::write_dataset(&ds, &out).map_err(err)?;
    Ok(ds.records.len())
}

/// (n_records, size, channels) of a CVDS file.
#[pyfunction]
fn dataset_info(path: PathBuf) -> PyResult<(usize, u32, u32)> {
    let ds = synthdata::read_dataset(&path).map_err(err)?;
    Ok((ds.records.len(), ds.size, ds.channels))
}

#[pyfunction]
fn psnr(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    cvd::eval::psnr(&a, &b).map_err(err)
}

#[pyfunction]
fn ssim(a: Vec<f64>, b: Vec<f64>, side: usize) -> PyResult<f64> {
    cvd::eval::ssim(&a, &b, side).map_err(err)
}

#[pyfunction]
fn similarity_matrix(queries: Vec<f64>, gallery: Vec<f64>, d: usize) -> PyResult<Vec<f64>> {
    cvd::eval::similarity_matrix(&queries, &gallery, d).map_err(err)
}

#[pyfunction]
fn recall_at_k(sim: Vec<f64>, n_gallery: usize, relevance: Vec<Vec<usize>>, k: usize) -> PyResult<f64> {
    cvd::eval::recall_at_k(&sim, n_gallery, &relevance, k).map_err(err)
}

#[pyfunction]
fn mean_average_precision(sim: Vec<f64>, n_gallery: usize, relevance: Vec<Vec<usize>>) -> PyResult<f64> {
    cvd::eval::mean_average_precision(&sim, n_gallery, &relevance).map_err(err)
}

/// Train from config text (the `key = value` format of the CLI); returns
/// the final test-split metrics.
#[pyfunction]
fn train<'py>(py: Python<'py>, config_text: &str) -> PyResult<Bound<'py, PyDict>> {
    let cfg = RunConfig::parse(config_text).map_err(err)?;
    let r = run_train(&cfg, None).map_err(err)?;
    let out = PyDict::new(py);
    out.set_item("r1_ds", r.summary.ds.recall(1))?;
    out.set_item("r5_ds", r.summary.ds.recall(5))?;
    out.set_item("r10_ds", r.summary.ds.recall(10))?;
    out.set_item("ap_ds", r.summary.ds.ap)?;
    out.set_item("r1_sd", r.summary.sd.recall(1))?;
    out.set_item("ap_sd", r.summary.sd.ap)?;
    out.set_item("psnr", r.summary.psnr)?;
    out.set_item("ssim", r.summary.ssim)?;
    out.set_item("probe_c", r.summary.probe_c)?;
    out.set_item("probe_v", r.summary.probe_v)?;
    out.set_item("loss_total", r.losses.total)?;
    out.set_item("checkpoint", r.checkpoint_path)?;
    out.set_item("metrics", r.metrics_path)?;
    Ok(out)
}

#[pymodule]
fn cvd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Graph>()?;
    m.add_class::<Tensor>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(sliced_w2, m)?)?;
    m.add_function(wrap_pyfunction!(loss_iic, m)?)?;
    m.add_function(wrap_pyfunction!(loss_irc, m)?)?;
    m.add_function(wrap_pyfunction!(loss_infonce, m)?)?;
    m.add_function(wrap_pyfunction!(generate_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(dataset_info, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(ssim, m)?)?;
    m.add_function(wrap_pyfunction!(similarity_matrix, m)?)?;
    m.add_function(wrap_pyfunction!(recall_at_k, m)?)?;
    m.add_function(wrap_pyfunction!(mean_average_precision, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    Ok(())
}
