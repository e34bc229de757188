//! Python bindings: point clouds, poses, metrics, and the full pipeline.

use std::path::{Path, PathBuf};

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use prgcn::harness::dataset::{generate, load_samples, SynthOptions};
use prgcn::harness::{PrGcn, RunConfig};
use prgcn::pointcloud::ply::{read_ply, write_ply};
use prgcn::pointcloud::synth::ShapeKind;

fn err(e: prgcn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

type Triple = (f64, f64, f64);

fn to_rows(points: &[[f64; 3]]) -> Vec<Triple> {
    points.iter().map(|p| (p[0], p[1], p[2])).collect()
}

fn from_rows(points: Vec<Triple>) -> Vec<[f64; 3]> {
    points.into_iter().map(|(x, y, z)| [x, y, z]).collect()
}

/// A 3D point cloud with optional per-point RGB colors in [0, 1].
#[pyclass(name = "PointCloud")]
#[derive(Clone)]
struct PyPointCloud {
    inner: prgcn::pointcloud::PointCloud,
}

#[pymethods]
impl PyPointCloud {
    #[new]
    #[pyo3(signature = (points, colors=None))]
    fn new(points: Vec<Triple>, colors: Option<Vec<Triple>>) -> PyResult<Self> {
        let inner = prgcn::pointcloud::PointCloud::new(from_rows(points), colors.map(from_rows))
            .map_err(err)?;
        Ok(PyPointCloud { inner })
    }

    #[staticmethod]
    fn read_ply(path: PathBuf) -> PyResult<Self> {
        Ok(PyPointCloud {
            inner: read_ply(&path).map_err(err)?,
        })
    }

    fn write_ply(&self, path: PathBuf) -> PyResult<()> {
        write_ply(&path, &self.inner).map_err(err)
    }

    fn points(&self) -> Vec<Triple> {
        to_rows(self.inner.points())
    }

    fn colors(&self) -> Option<Vec<Triple>> {
        self.inner.colors().map(to_rows)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("PointCloud({} points)", self.inner.len())
    }
}

/// A rigid transform: unit quaternion (w, x, y, z) plus translation.
#[pyclass(name = "Pose")]
#[derive(Clone)]
struct PyPose {
    inner: prgcn::pose::Pose,
}

#[pymethods]
impl PyPose {
    #[new]
    fn new(quat: (f64, f64, f64, f64), trans: Triple) -> PyResult<Self> {
        let inner = prgcn::pose::Pose::new(
            [quat.0, quat.1, quat.2, quat.3],
            [trans.0, trans.1, trans.2],
        )
        .map_err(err)?;
        Ok(PyPose { inner })
    }

    #[staticmethod]
    fn identity() -> Self {
        PyPose {
            inner: prgcn::pose::Pose::identity(),
        }
    }

    #[getter]
    fn quat(&self) -> (f64, f64, f64, f64) {
        let q = self.inner.quat;
        (q[0], q[1], q[2], q[3])
    }

    #[getter]
    fn trans(&self) -> Triple {
        let t = self.inner.trans;
        (t[0], t[1], t[2])
    }

    fn apply(&self, point: Triple) -> Triple {
        let p = self.inner.apply(&[point.0, point.1, point.2]);
        (p[0], p[1], p[2])
    }

    fn compose(&self, other: &PyPose) -> Self {
        PyPose {
            inner: self.inner.compose(&other.inner),
        }
    }

    fn inverse(&self) -> Self {
        PyPose {
            inner: self.inner.inverse(),
        }
    }

    fn __repr__(&self) -> String {
        format!("Pose(quat={:?}, trans={:?})", self.inner.quat, self.inner.trans)
    }
}

#[pyfunction]
fn chamfer(a: &PyPointCloud, b: &PyPointCloud) -> PyResult<f64> {
    prgcn::pointcloud::chamfer(&a.inner, &b.inner).map_err(err)
}

#[pyfunction]
fn knn(cloud: &PyPointCloud, k: usize) -> PyResult<Vec<Vec<usize>>> {
    prgcn::pointcloud::knn(&cloud.inner, k).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (cloud, m, start_index=0))]
fn fps(cloud: &PyPointCloud, m: usize, start_index: usize) -> PyResult<Vec<usize>> {
    prgcn::pointcloud::fps(&cloud.inner, m, start_index).map_err(err)
}

#[pyfunction]
fn add_metric(gt: &PyPose, pred: &PyPose, model: &PyPointCloud) -> f64 {
    prgcn::metrics::add_metric(&gt.inner, &pred.inner, &model.inner)
}

#[pyfunction]
fn adds_metric(gt: &PyPose, pred: &PyPose, model: &PyPointCloud) -> f64 {
    prgcn::metrics::adds_metric(&gt.inner, &pred.inner, &model.inner)
}

#[pyfunction]
fn auc(errors: Vec<f64>, max_threshold: f64) -> PyResult<f64> {
    prgcn::metrics::auc(&errors, max_threshold).map_err(err)
}

#[pyfunction]
fn success_rate(errors: Vec<f64>, threshold: f64) -> PyResult<f64> {
    prgcn::metrics::success_rate(&errors, threshold).map_err(err)
}

#[pyfunction]
fn diameter(model: &PyPointCloud) -> f64 {
    prgcn::metrics::diameter(&model.inner)
}

/// Gradient check of every autodiff primitive and network; returns
/// (name, max relative error, passed) rows.
#[pyfunction]
#[pyo3(signature = (seeds=10))]
fn gradcheck(seeds: u64) -> PyResult<Vec<(String, f64, bool)>> {
    Ok(prgcn::gradcheck::check_all(seeds)
        .map_err(err)?
        .into_iter()
        .map(|r| {
            let pass = r.pass();
            (r.name, r.max_rel_err, pass)
        })
        .collect())
}

/// Write synthetic scenes plus a manifest; returns the manifest path.
#[pyfunction]
#[pyo3(signature = (out_dir, shape="sphere", count=10, n_points=150, occlusion=0.4, noise=0.01, seed=0, model_points=64))]
#[allow(clippy::too_many_arguments)]
fn synthesize(
    out_dir: PathBuf,
    shape: &str,
    count: usize,
    n_points: usize,
    occlusion: f64,
    noise: f64,
    seed: u64,
    model_points: usize,
) -> PyResult<PathBuf> {
    generate(
        &out_dir,
        &SynthOptions {
            shape: ShapeKind::parse(shape).map_err(err)?,
            count,
            n_points,
            occlusion,
            noise,
            seed,
            model_points,
        },
    )
    .map_err(err)
}

/// The full pose-estimation pipeline: refiner, fusion network, pose heads.
#[pyclass(name = "Pipeline")]
struct PyPipeline {
    inner: PrGcn,
}

#[pymethods]
impl PyPipeline {
    /// Build from default hyperparameters plus `key = value` overrides.
    #[new]
    #[pyo3(signature = (**overrides))]
    fn new(overrides: Option<std::collections::HashMap<String, String>>) -> PyResult<Self> {
        let mut cfg = RunConfig::default();
        if let Some(map) = overrides {
            let mut entries: Vec<_> = map.into_iter().collect();
            entries.sort();
            for (k, v) in entries {
                cfg.set(&k, &v).map_err(err)?;
            }
        }
        cfg.validate().map_err(err)?;
        Ok(PyPipeline {
            inner: PrGcn::new(cfg).map_err(err)?,
        })
    }

    /// Train on a dataset manifest; returns per-epoch (phase, loss) pairs.
    fn train(&mut self, manifest: PathBuf) -> PyResult<Vec<(String, f64)>> {
        let samples = load_samples(&manifest).map_err(err)?;
        let log = self.inner.train(&samples).map_err(err)?;
        Ok(log
            .epochs
            .into_iter()
            .map(|e| (e.phase.to_string(), e.loss))
            .collect())
    }

    /// Complete and denoise one raw cloud.
    fn refine(&self, raw: &PyPointCloud) -> PyResult<PyPointCloud> {
        Ok(PyPointCloud {
            inner: self.inner.refine(&raw.inner).map_err(err)?,
        })
    }

    /// Full inference: the highest-confidence pose for one raw cloud.
    fn predict(&self, raw: &PyPointCloud) -> PyResult<PyPose> {
        Ok(PyPose {
            inner: self.inner.predict(&raw.inner).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(Path::new(&path)).map_err(err)
    }

    fn load(&mut self, path: PathBuf) -> PyResult<()> {
        self.inner.load(Path::new(&path)).map_err(err)
    }

    /// Evaluate on a manifest; returns the plain-text report and the list of
    /// per-sample failures.
    #[pyo3(signature = (manifest, use_gt=false, symmetric=false, threads=1))]
    fn evaluate(
        &self,
        manifest: PathBuf,
        use_gt: bool,
        symmetric: bool,
        threads: usize,
    ) -> PyResult<(String, Vec<String>)> {
        let samples = load_samples(&manifest).map_err(err)?;
        let (report, failures) = self
            .inner
            .eval(&samples, use_gt, symmetric, threads.max(1))
            .map_err(err)?;
        Ok((report.to_table(), failures))
    }
}

#[pymodule]
fn prgcn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPointCloud>()?;
    m.add_class::<PyPose>()?;
    m.add_class::<PyPipeline>()?;
    m.add_function(wrap_pyfunction!(chamfer, m)?)?;
    m.add_function(wrap_pyfunction!(knn, m)?)?;
    m.add_function(wrap_pyfunction!(fps, m)?)?;
    m.add_function(wrap_pyfunction!(add_metric, m)?)?;
    m.add_function(wrap_pyfunction!(adds_metric, m)?)?;
    m.add_function(wrap_pyfunction!(auc, m)?)?;
    m.add_function(wrap_pyfunction!(success_rate, m)?)?;
    m.add_function(wrap_pyfunction!(diameter, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(synthesize, m)?)?;
    Ok(())
}
