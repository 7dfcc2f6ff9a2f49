//! Python bindings for the dragflow core: tensors, flow files, trajectory
//! sampling, the noise schedule, the model, sprite scenes and metrics.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dragflow::conditions::ConditionSet;
use dragflow::diffusion::{self, NoiseSchedule};
use dragflow::flow::{self, FlowField, FlowFrame};
use dragflow::sprites::{self, caption_vocabulary, SceneSpec};
use dragflow::trajectory::{self, AnchorConfig, GaussianConfig};
use dragflow::unet::{DragModel, ModelConfig};
use dragflow::{metrics, Error};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for dragflow::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Dense row-major float64 array.
#[pyclass(name = "Tensor", module = "dragflow_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: dragflow::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: dragflow::Tensor::new(&shape, data).py()?,
        })
    }

    #[staticmethod]
    fn zeros(shape: Vec<usize>) -> Self {
        Self {
            inner: dragflow::Tensor::zeros(&shape),
        }
    }

    /// Standard normal draws scaled by `std`, reproducible from `seed`.
    #[staticmethod]
    #[pyo3(signature = (shape, seed, std = 1.0))]
    fn randn(shape: Vec<usize>, seed: u64, std: f64) -> Self {
        Self {
            inner: dragflow::Tensor::randn(&shape, std, &mut ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    #[getter]
    fn shape(&self) -> Vec<usize> {
        self.inner.shape().to_vec()
    }

    #[getter]
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn mean(&self) -> f64 {
        self.inner.mean()
    }

    fn max_abs_diff(&self, other: &PyTensor) -> f64 {
        self.inner.max_abs_diff(&other.inner)
    }

    fn __len__(&self) -> usize {
        self.inner.data().len()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

/// One frame of optical flow with interleaved `(u, v)` per pixel.
#[pyclass(name = "FlowFrame", module = "dragflow_py", from_py_object)]
#[derive(Clone)]
struct PyFlowFrame {
    inner: FlowFrame,
}

#[pymethods]
impl PyFlowFrame {
    #[new]
    fn new(width: usize, height: usize, uv: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: FlowFrame::from_uv(width, height, uv).py()?,
        })
    }

    /// Parses Middlebury `.flo` bytes.
    #[staticmethod]
    fn from_flo(bytes: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: flow::read_flo(bytes).py()?,
        })
    }

    fn to_flo<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &flow::write_flo(&self.inner))
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn uv(&self) -> Vec<f64> {
        self.inner.uv().to_vec()
    }

    fn get(&self, x: usize, y: usize) -> PyResult<(f64, f64)> {
        if x >= self.inner.width() || y >= self.inner.height() {
            return Err(PyValueError::new_err(format!("pixel ({x}, {y}) is outside the frame")));
        }
        Ok(self.inner.get(x, y))
    }

    fn __eq__(&self, other: &PyFlowFrame) -> bool {
        self.inner == other.inner
    }
}

fn field(frames: Vec<PyFlowFrame>) -> PyResult<FlowField> {
    FlowField::new(frames.into_iter().map(|f| f.inner).collect()).py()
}

fn frames_of(field: &FlowField) -> Vec<PyFlowFrame> {
    field.frames().iter().map(|f| PyFlowFrame { inner: f.clone() }).collect()
}

#[pyfunction]
fn read_flo_dir(dir: PathBuf) -> PyResult<Vec<PyFlowFrame>> {
    Ok(frames_of(&flow::read_flo_dir(&dir).py()?))
}

#[pyfunction]
fn write_flo_dir(frames: Vec<PyFlowFrame>, dir: PathBuf) -> PyResult<()> {
    flow::write_flo_dir(&field(frames)?, &dir).py()
}

/// Trajectories sampled from dense flow.
#[pyclass(name = "SampledTrajectories", module = "dragflow_py", get_all)]
struct PySampled {
    delta: (i64, i64),
    anchors: Vec<(usize, usize)>,
    paths: Vec<Vec<[f64; 2]>>,
    sparse: Vec<PyFlowFrame>,
    map: Vec<PyFlowFrame>,
}

#[pyfunction]
#[pyo3(signature = (flow, seed, interval = 16, max_trajectories = 8, kernel_size = 99, sigma = 10.0))]
fn sample_trajectories(flow: Vec<PyFlowFrame>, seed: u64, interval: usize, max_trajectories: usize, kernel_size: usize, sigma: f64) -> PyResult<PySampled> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = trajectory::sample_trajectories(
        &field(flow)?,
        AnchorConfig { interval, max_trajectories },
        GaussianConfig { kernel_size, sigma },
        &mut rng,
    )
    .py()?;
    Ok(PySampled {
        delta: s.delta,
        anchors: s.anchors,
        paths: s.set.paths,
        sparse: frames_of(&s.set.sparse),
        map: frames_of(&s.map.field),
    })
}

#[pyfunction]
fn gaussian_enhance(sparse: Vec<PyFlowFrame>, kernel_size: usize, sigma: f64) -> PyResult<Vec<PyFlowFrame>> {
    Ok(frames_of(&trajectory::gaussian_enhance(&field(sparse)?, GaussianConfig { kernel_size, sigma }).py()?.field))
}

/// Linear-beta noise schedule with `t` in `1..=steps`.
#[pyclass(name = "NoiseSchedule", module = "dragflow_py")]
struct PySchedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl PySchedule {
    #[new]
    fn new(steps: usize, beta_start: f64, beta_end: f64) -> PyResult<Self> {
        Ok(Self {
            inner: diffusion::make_schedule(steps, beta_start, beta_end).py()?,
        })
    }

    #[getter]
    fn steps(&self) -> usize {
        self.inner.steps()
    }

    fn beta(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.beta(t))
    }

    fn alpha(&self, t: usize) -> PyResult<f64> {
        self.check(t, 1)?;
        Ok(self.inner.alpha(t))
    }

    fn alpha_bar(&self, t: usize) -> PyResult<f64> {
        self.check(t, 0)?;
        Ok(self.inner.alpha_bar(t))
    }

    /// `√ᾱ_t·x0 + √(1−ᾱ_t)·ε`.
    fn forward_diffuse(&self, x0: &PyTensor, t: usize, eps: &PyTensor) -> PyResult<PyTensor> {
        self.check(t, 1)?;
        Ok(PyTensor {
            inner: diffusion::forward_diffuse(&x0.inner, t, &eps.inner, &self.inner).py()?,
        })
    }
}

impl PySchedule {
    fn check(&self, t: usize, lo: usize) -> PyResult<()> {
        if t < lo || t > self.inner.steps() {
            return Err(PyValueError::new_err(format!("t must lie in {lo}..={}, got {t}", self.inner.steps())));
        }
        Ok(())
    }
}

/// Trajectory-conditioned video denoiser.
#[pyclass(name = "Model", module = "dragflow_py")]
struct PyModel {
    inner: DragModel,
}

#[pymethods]
impl PyModel {
    /// Fresh model; keys in `config_json` override the default config.
    #[new]
    #[pyo3(signature = (config_json = None))]
    fn new(config_json: Option<&str>) -> PyResult<Self> {
        let cfg = match config_json {
            Some(s) => merged_config(s)?,
            None => ModelConfig::default(),
        };
        Ok(Self {
            inner: DragModel::new(cfg).py()?,
        })
    }

    #[staticmethod]
    fn load(config_json: &str, checkpoint: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: DragModel::load(ModelConfig::from_json(config_json).py()?, &checkpoint).py()?,
        })
    }

    #[getter]
    fn config_json(&self) -> String {
        self.inner.config.to_json()
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Noise prediction for `x_t` `[L, 3, H, W]` at step `t`; omitted controls are null.
    #[pyo3(signature = (x_t, t, caption = "", image = None, strokes = None))]
    fn predict_noise(&self, x_t: &PyTensor, t: usize, caption: &str, image: Option<&PyTensor>, strokes: Option<Vec<Vec<[f64; 2]>>>) -> PyResult<PyTensor> {
        let c = self.conditions(caption, image, strokes)?;
        Ok(PyTensor {
            inner: self.inner.predict_noise_tensor(&x_t.inner, &[t], &[c]).py()?,
        })
    }

    /// Samples a video `[L, 3, H, W]` in `[0, 1]`.
    #[pyo3(signature = (caption, strokes, seed, guidance = 3.0, image = None))]
    fn generate(&self, py: Python<'_>, caption: &str, strokes: Vec<Vec<[f64; 2]>>, seed: u64, guidance: f64, image: Option<&PyTensor>) -> PyResult<PyTensor> {
        let c = self.conditions(caption, image, Some(strokes))?;
        let model = &self.inner;
        let frames = py
            .detach(|| {
                let schedule = NoiseSchedule::for_model(&model.config)?;
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                diffusion::sample(model, &c, &schedule, &mut rng, guidance, &mut |_, _| {})
            })
            .py()?;
        Ok(PyTensor { inner: frames })
    }
}

fn merged_config(overrides: &str) -> PyResult<ModelConfig> {
    let bad = |e: serde_json::Error| PyValueError::new_err(e.to_string());
    let mut base = serde_json::to_value(ModelConfig::default()).map_err(bad)?;
    let serde_json::Value::Object(over) = serde_json::from_str(overrides).map_err(bad)? else {
        return Err(PyValueError::new_err("config must be a JSON object"));
    };
    for (k, v) in over {
        base[k] = v;
    }
    ModelConfig::from_json(&base.to_string()).py()
}

impl PyModel {
    fn conditions(&self, caption: &str, image: Option<&PyTensor>, strokes: Option<Vec<Vec<[f64; 2]>>>) -> PyResult<ConditionSet> {
        let cfg = &self.inner.config;
        let (tokens, _) = caption_vocabulary().tokenize_lossy(caption);
        let strokes = strokes.unwrap_or_default();
        let map = trajectory::user_trajectory_to_map(&strokes, cfg.frames, cfg.height, cfg.width, cfg.trajectory_gaussian).py()?;
        let img = image.map(|t| t.inner.clone()).unwrap_or_else(|| dragflow::Tensor::zeros(&[3, cfg.height, cfg.width]));
        let mut c = ConditionSet::new(tokens, img, map.to_tensor()).py()?;
        if image.is_none() {
            c.drop_image();
        }
        if caption.trim().is_empty() {
            c.drop_text();
        }
        if strokes.is_empty() {
            c.drop_trajectory();
        }
        Ok(c)
    }
}

/// A rendered sprite clip.
#[pyclass(name = "Clip", module = "dragflow_py", get_all)]
struct PyClip {
    frames: PyTensor,
    flow: Vec<PyFlowFrame>,
    caption: String,
    scene_json: String,
}

fn clip(spec: &SceneSpec) -> PyResult<PyClip> {
    let s = sprites::generate_scene(spec).py()?;
    Ok(PyClip {
        frames: PyTensor { inner: s.frames },
        flow: frames_of(&s.flow),
        caption: s.caption,
        scene_json: serde_json::to_string(&s.scene).map_err(|e| PyValueError::new_err(e.to_string()))?,
    })
}

#[pyfunction]
fn render_scene(scene_json: &str) -> PyResult<PyClip> {
    let spec: SceneSpec = serde_json::from_str(scene_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    clip(&spec)
}

/// The eight fixed clips used for the overfit experiment.
#[pyfunction]
#[pyo3(signature = (width = 32, height = 32, frames = 8, speed = 1.5))]
fn overfit_clips(width: usize, height: usize, frames: usize, speed: f64) -> PyResult<Vec<PyClip>> {
    sprites::overfit_scenes(width, height, frames, speed).iter().map(clip).collect()
}

/// Per-frame centroid of pixels near `color`; `None` where the color is absent.
#[pyfunction]
#[pyo3(signature = (frames, color, tolerance = metrics::COLOR_TOLERANCE))]
fn centroid_track(frames: &PyTensor, color: [f64; 3], tolerance: f64) -> PyResult<Vec<Option<[f64; 2]>>> {
    metrics::centroid_track(&frames.inner, color, tolerance).py()
}

/// Mean and max distance to `target` after arc-length resampling.
#[pyfunction]
fn trajectory_error(tracked: Vec<[f64; 2]>, target: Vec<[f64; 2]>) -> PyResult<(f64, f64)> {
    let s = metrics::trajectory_error(&tracked, &target).py()?;
    Ok((s.mean, s.max))
}

#[pyfunction]
fn psnr(a: &PyTensor, b: &PyTensor) -> PyResult<f64> {
    metrics::psnr(&a.inner, &b.inner).py()
}

#[pyfunction]
fn tokenize(caption: &str) -> (Vec<usize>, Vec<String>) {
    caption_vocabulary().tokenize_lossy(caption)
}

#[pymodule]
fn dragflow_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyTensor>()?;
    m.add_class::<PyFlowFrame>()?;
    m.add_class::<PySampled>()?;
    m.add_class::<PySchedule>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyClip>()?;
    m.add_function(wrap_pyfunction!(read_flo_dir, m)?)?;
    m.add_function(wrap_pyfunction!(write_flo_dir, m)?)?;
    m.add_function(wrap_pyfunction!(sample_trajectories, m)?)?;
    m.add_function(wrap_pyfunction!(gaussian_enhance, m)?)?;
    m.add_function(wrap_pyfunction!(render_scene, m)?)?;
    m.add_function(wrap_pyfunction!(overfit_clips, m)?)?;
    m.add_function(wrap_pyfunction!(centroid_track, m)?)?;
    m.add_function(wrap_pyfunction!(trajectory_error, m)?)?;
    m.add_function(wrap_pyfunction!(psnr, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    Ok(())
}
