//! Python bindings: scene synthesis, edge features, Beta response models,
//! training and search.

use std::sync::Arc;

use active_testing::bench::{bench_compare, BenchScene};
use active_testing::beta;
use active_testing::engine::{Engine, SearchConfig};
use active_testing::features::{self, Direction, IntegralSet, Orientation};
use active_testing::image::GrayImage;
use active_testing::lattice::{CellId, Lattice, Rect};
use active_testing::models;
use active_testing::oracle::GroundTruthOracle;
use active_testing::scene::{self, SceneSpec, SceneStyle, Target};
use active_testing::training::{train_model_file, TrainingScene};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: active_testing::Error) -> PyErr {
    use active_testing::Error as E;
    match e {
        E::Io(io) => PyOSError::new_err(io.to_string()),
        E::DegeneratePosterior | E::DegenerateSample(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Parses a JSON string into Python objects.
fn to_py<'py>(py: Python<'py>, value: &impl serde::Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(json_err)?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Target as `(x, y, size)`.
type PyTarget = (u32, u32, f64);

fn targets_from(list: Vec<PyTarget>) -> Vec<Target> {
    list.into_iter().map(|(x, y, size)| Target::new(x, y, size)).collect()
}

fn orientation(dir: Option<usize>) -> PyResult<Orientation> {
    match dir {
        None => Ok(Orientation::Any),
        Some(d) => Direction::ALL
            .get(d)
            .map(|&d| Orientation::Dir(d))
            .ok_or_else(|| PyValueError::new_err(format!("direction {d} must be 0..=3"))),
    }
}

#[pyclass(name = "Lattice", frozen)]
struct PyLattice(Lattice);

#[pymethods]
impl PyLattice {
    #[new]
    fn new(width: u32, height: u32) -> PyResult<Self> {
        Lattice::new(width, height).map(Self).map_err(py_err)
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.0.depth()
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    fn cell_count(&self) -> usize {
        self.0.cells().len()
    }

    /// `(x0, y0, width, height)` of cell `index` at `level`, or `None`.
    fn cell(&self, level: u32, index: u64) -> Option<(u32, u32, u32, u32)> {
        self.0.cell(CellId { level, index }).map(|c| (c.rect.x0, c.rect.y0, c.rect.width, c.rect.height))
    }
}

#[pyclass(name = "BetaModel", frozen)]
struct PyBetaModel(beta::BetaModel);

#[pymethods]
impl PyBetaModel {
    #[new]
    fn new(alpha: f64, beta: f64) -> PyResult<Self> {
        beta::BetaModel::new(alpha, beta).map(Self).map_err(py_err)
    }

    #[getter]
    fn alpha(&self) -> f64 {
        self.0.alpha()
    }

    #[getter]
    fn beta(&self) -> f64 {
        self.0.beta()
    }

    fn mean(&self) -> f64 {
        self.0.mean()
    }

    fn pdf(&self, x: f64) -> PyResult<f64> {
        self.0.pdf(x).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("BetaModel({}, {})", self.0.alpha(), self.0.beta())
    }
}

#[pyfunction]
fn fit_beta_mle(samples: Vec<f64>) -> PyResult<PyBetaModel> {
    beta::fit_beta_mle(&samples).map(PyBetaModel).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (a, b, n_samples = models::DEFAULT_MC_SAMPLES, seed = 0))]
fn l2_distance(a: &PyBetaModel, b: &PyBetaModel, n_samples: usize, seed: u64) -> PyResult<f64> {
    beta::l2_distance(&a.0, &b.0, n_samples, seed).map_err(py_err)
}

#[pyclass(name = "Image", frozen)]
struct PyImage(GrayImage);

#[pymethods]
impl PyImage {
    #[new]
    fn new(width: u32, height: u32, data: Vec<u8>) -> PyResult<Self> {
        GrayImage::new(width, height, data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn from_pgm(data: &[u8]) -> PyResult<Self> {
        GrayImage::decode_pgm(data).map(Self).map_err(py_err)
    }

    #[staticmethod]
    fn read_pgm(path: &str) -> PyResult<Self> {
        GrayImage::read_pgm(path).map(Self).map_err(py_err)
    }

    fn to_pgm<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.encode_pgm())
    }

    fn pixels<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, self.0.data())
    }

    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }
}

/// Renders a scene and returns the image with its targets as `(x, y, size)`.
#[pyfunction]
#[pyo3(signature = (width, height, targets, texture = None, target_density = None, clutter = None, seed = 0))]
fn synth_scene(
    width: u32,
    height: u32,
    targets: Vec<PyTarget>,
    texture: Option<f64>,
    target_density: Option<f64>,
    clutter: Option<u32>,
    seed: u64,
) -> PyResult<(PyImage, Vec<PyTarget>)> {
    let style = SceneStyle::default();
    let spec = SceneSpec {
        width,
        height,
        targets: targets_from(targets),
        texture: texture.unwrap_or(style.texture),
        target_density: target_density.unwrap_or(style.target_density),
        clutter: clutter.unwrap_or(style.clutter),
        seed,
    };
    let (img, truth) = scene::synth_scene(&spec).map_err(py_err)?;
    Ok((PyImage(img), truth.targets.iter().map(|t| (t.x, t.y, t.size)).collect()))
}

#[pyclass(name = "EdgeMap", frozen)]
struct PyEdgeMap(Arc<IntegralSet>);

#[pymethods]
impl PyEdgeMap {
    #[getter]
    fn width(&self) -> u32 {
        self.0.width()
    }

    #[getter]
    fn height(&self) -> u32 {
        self.0.height()
    }

    /// Edge pixels in the rectangle; `direction` 0..=3 selects one bin.
    #[pyo3(signature = (x0, y0, width, height, direction = None))]
    fn count(&self, x0: u32, y0: u32, width: u32, height: u32, direction: Option<usize>) -> PyResult<u64> {
        Ok(self.0.count(&Rect::new(x0, y0, width, height), orientation(direction)?))
    }

    #[pyo3(signature = (x0, y0, width, height, direction = None))]
    fn edge_proportion(&self, x0: u32, y0: u32, width: u32, height: u32, direction: Option<usize>) -> PyResult<f64> {
        self.0.edge_proportion(&Rect::new(x0, y0, width, height), orientation(direction)?).map_err(py_err)
    }
}

#[pyfunction]
#[pyo3(signature = (image, threshold = features::DEFAULT_EDGE_THRESHOLD))]
fn detect_edges(image: &PyImage, threshold: i32) -> PyEdgeMap {
    PyEdgeMap(Arc::new(features::detect_edges(&image.0, threshold)))
}

#[pyclass(name = "ModelFile", frozen)]
struct PyModelFile(Arc<models::ModelFile>);

#[pymethods]
impl PyModelFile {
    #[staticmethod]
    fn read(path: &str) -> PyResult<Self> {
        models::ModelFile::read(path).map(|m| Self(Arc::new(m))).map_err(py_err)
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        models::ModelFile::from_json(text).map(|m| Self(Arc::new(m))).map_err(py_err)
    }

    fn to_json(&self) -> PyResult<String> {
        self.0.to_json().map_err(py_err)
    }

    fn write(&self, path: &str) -> PyResult<()> {
        self.0.write(path).map_err(py_err)
    }

    #[getter]
    fn depth(&self) -> u32 {
        self.0.models.depth()
    }

    #[getter]
    fn scales(&self) -> usize {
        self.0.models.scales()
    }

    #[getter]
    fn k_soft(&self) -> usize {
        self.0.models.k_soft()
    }

    /// Trains on `(edges, targets)` pairs that share one image size.
    #[staticmethod]
    #[pyo3(signature = (scenes, samples = 5000, seed = 0, mc_samples = models::DEFAULT_MC_SAMPLES, config = None))]
    fn train(
        py: Python<'_>,
        scenes: Vec<(PyRef<'_, PyEdgeMap>, Vec<PyTarget>)>,
        samples: usize,
        seed: u64,
        mc_samples: usize,
        config: Option<&str>,
    ) -> PyResult<Self> {
        let config = parse_config(config)?;
        let Some((first, _)) = scenes.first() else {
            return Err(PyValueError::new_err("no training scenes"));
        };
        let (w, h) = (first.0.width(), first.0.height());
        let lattice = Lattice::new(w, h).map_err(py_err)?;
        let intervals = config.intervals_for(w, h);
        let training: Vec<TrainingScene> =
            scenes.into_iter().map(|(e, t)| TrainingScene { integrals: (*e.0).clone(), targets: targets_from(t) }).collect();
        let file = py
            .detach(|| train_model_file(&training, &lattice, &features::soft_families(), &intervals, samples, seed, mc_samples, config.mc_seed))
            .map_err(py_err)?;
        Ok(Self(Arc::new(file)))
    }
}

fn parse_config(config: Option<&str>) -> PyResult<SearchConfig> {
    let config: SearchConfig = config.map(serde_json::from_str).transpose().map_err(json_err)?.unwrap_or_default();
    config.validate().map_err(py_err)?;
    Ok(config)
}

/// Search over images of one size with one model file; perfect tests are
/// answered from the supplied ground truth.
#[pyclass(name = "Searcher", frozen)]
struct PySearcher {
    model: Arc<models::ModelFile>,
    lattice: Lattice,
    config: SearchConfig,
}

impl PySearcher {
    fn engine(&self) -> PyResult<Engine<'_>> {
        Engine::new(self.config.clone(), self.lattice, &self.model.models, &self.model.table).map_err(py_err)
    }
}

#[pymethods]
impl PySearcher {
    /// `config` is a JSON object with search-configuration fields.
    #[new]
    #[pyo3(signature = (model, width, height, config = None))]
    fn new(model: &PyModelFile, width: u32, height: u32, config: Option<&str>) -> PyResult<Self> {
        let s = Self { model: model.0.clone(), lattice: Lattice::new(width, height).map_err(py_err)?, config: parse_config(config)? };
        s.engine()?;
        Ok(s)
    }

    fn run_single<'py>(&self, py: Python<'py>, edges: &PyEdgeMap, targets: Vec<PyTarget>) -> PyResult<Bound<'py, PyAny>> {
        let engine = self.engine()?;
        let mut oracle = GroundTruthOracle::new(targets_from(targets), engine.intervals().clone());
        let res = py.detach(|| engine.run_single(&edges.0, &mut oracle)).map_err(py_err)?;
        to_py(py, &res)
    }

    fn run_multi<'py>(&self, py: Python<'py>, edges: &PyEdgeMap, targets: Vec<PyTarget>) -> PyResult<Bound<'py, PyAny>> {
        let engine = self.engine()?;
        let mut oracle = GroundTruthOracle::new(targets_from(targets), engine.intervals().clone());
        let res = py.detach(|| engine.run_multi(&edges.0, &mut oracle)).map_err(py_err)?;
        to_py(py, &res)
    }

    /// Benchmarks `(id, edges, targets)` scenes; returns the CSV text and the
    /// summary.
    #[pyo3(signature = (scenes, seed = 0))]
    fn bench<'py>(
        &self,
        py: Python<'py>,
        scenes: Vec<(String, PyRef<'_, PyEdgeMap>, Vec<PyTarget>)>,
        seed: u64,
    ) -> PyResult<(String, Bound<'py, PyAny>)> {
        let engine = self.engine()?;
        let scenes: Vec<BenchScene> =
            scenes.into_iter().map(|(id, e, t)| BenchScene { id, integrals: (*e.0).clone(), targets: targets_from(t) }).collect();
        let report = py.detach(|| bench_compare(&scenes, &engine, seed, false)).map_err(py_err)?;
        Ok((report.to_csv(), to_py(py, &report.summary)?))
    }
}

#[pymodule]
fn active_testing_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyLattice>()?;
    m.add_class::<PyBetaModel>()?;
    m.add_class::<PyImage>()?;
    m.add_class::<PyEdgeMap>()?;
    m.add_class::<PyModelFile>()?;
    m.add_class::<PySearcher>()?;
    m.add_function(wrap_pyfunction!(fit_beta_mle, m)?)?;
    m.add_function(wrap_pyfunction!(l2_distance, m)?)?;
    m.add_function(wrap_pyfunction!(synth_scene, m)?)?;
    m.add_function(wrap_pyfunction!(detect_edges, m)?)?;
    Ok(())
}
