use std::path::PathBuf;

use forge_core::corpus::{Manifest, MixtureKind, Split};
use forge_core::harness::{self, HarnessConfig, RunOptions, Workspace};
use forge_core::metrics;
use forge_core::separator::{checkpoint, separate};
use forge_core::signal::{self, AudioClip};
use forge_core::spectral::{self, StftConfig};
use forge_core::Error;
use pyo3::create_exception;
use pyo3::exceptions::{PyException, PyFileNotFoundError, PyValueError};
use pyo3::prelude::*;

create_exception!(duplex_forge, ForgeError, PyException);
create_exception!(duplex_forge, ConfigError, ForgeError);
create_exception!(duplex_forge, RefusedError, ForgeError);

fn to_py(err: Error) -> PyErr {
    match err {
        Error::MissingFile(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        e @ Error::Config { .. } => ConfigError::new_err(e.to_string()),
        e @ Error::Refused(_) => RefusedError::new_err(e.to_string()),
        e @ (Error::InvalidArgument(_) | Error::ShapeMismatch(_) | Error::LengthMismatch(..) | Error::RateMismatch { .. }) => {
            PyValueError::new_err(e.to_string())
        }
        e => ForgeError::new_err(e.to_string()),
    }
}

#[pyclass(name = "AudioClip", module = "duplex_forge", from_py_object)]
#[derive(Clone)]
struct PyAudioClip {
    inner: AudioClip,
}

#[pymethods]
impl PyAudioClip {
    #[new]
    #[pyo3(signature = (samples, sample_rate = 8000))]
    fn new(samples: Vec<f64>, sample_rate: u32) -> PyResult<Self> {
        Ok(Self {
            inner: AudioClip::new(samples, sample_rate).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: signal::load_wav_mono(path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        signal::save_wav(&self.inner, path).map_err(to_py)
    }

    #[getter]
    fn samples(&self) -> Vec<f64> {
        self.inner.samples.clone()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.sample_rate
    }

    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s()
    }

    fn energy(&self) -> f64 {
        self.inner.energy()
    }

    fn to_8k(&self) -> PyResult<Self> {
        Ok(Self {
            inner: signal::resample_to_8k(&self.inner).map_err(to_py)?,
        })
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("AudioClip({} samples @ {} Hz)", self.inner.len(), self.inner.sample_rate)
    }
}

/// `(frames, bins)` of the analysis grid for a clip of `length` samples.
#[pyfunction]
fn stft_shape(length: usize) -> (usize, usize) {
    let c = StftConfig::default();
    (c.frames_for(length), c.bins())
}

/// Magnitude spectrogram as a list of frames.
#[pyfunction]
fn stft_magnitudes(clip: &PyAudioClip) -> PyResult<Vec<Vec<f64>>> {
    let spec = spectral::stft(&clip.inner, &StftConfig::default()).map_err(to_py)?;
    Ok(spec.magnitudes().outer_iter().map(|r| r.to_vec()).collect())
}

/// Analysis followed by synthesis; returns the reconstructed clip.
#[pyfunction]
fn stft_round_trip(clip: &PyAudioClip) -> PyResult<PyAudioClip> {
    let spec = spectral::stft(&clip.inner, &StftConfig::default()).map_err(to_py)?;
    Ok(PyAudioClip {
        inner: spectral::istft(&spec).map_err(to_py)?,
    })
}

#[pyfunction]
fn si_sdr(estimate: &PyAudioClip, reference: &PyAudioClip) -> PyResult<f64> {
    Ok(metrics::si_sdr(&estimate.inner, &reference.inner).map_err(to_py)?.value_db)
}

/// Best-permutation SI-SDR: `(mean_db, permutation, per_reference_db)`.
#[pyfunction]
fn si_sdr_pit(estimates: Vec<PyAudioClip>, references: Vec<PyAudioClip>) -> PyResult<(f64, Vec<usize>, Vec<f64>)> {
    let est: Vec<AudioClip> = estimates.into_iter().map(|c| c.inner).collect();
    let refs: Vec<AudioClip> = references.into_iter().map(|c| c.inner).collect();
    let pit = metrics::si_sdr_pit(&est, &refs).map_err(to_py)?;
    Ok((pit.mean_db, pit.permutation, pit.per_reference_db))
}

/// A trained separator loaded from a checkpoint.
#[pyclass(name = "Separator", module = "duplex_forge")]
struct PySeparator {
    inner: checkpoint::Checkpoint,
}

#[pymethods]
impl PySeparator {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: checkpoint::load(path).map_err(to_py)?,
        })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label.clone()
    }

    #[getter]
    fn layers(&self) -> usize {
        self.inner.config.layers
    }

    #[getter]
    fn hidden(&self) -> usize {
        self.inner.config.hidden
    }

    #[getter]
    fn embed_dim(&self) -> usize {
        self.inner.config.embed_dim
    }

    fn parameter_count(&self) -> usize {
        self.inner.params.parameter_count()
    }

    fn separate(&self, py: Python<'_>, mixture: &PyAudioClip) -> PyResult<Vec<PyAudioClip>> {
        let mix = mixture.inner.clone();
        let out = py
            .detach(|| separate(&mix, &self.inner.params, &self.inner.config))
            .map_err(to_py)?;
        Ok(out.into_iter().map(|inner| PyAudioClip { inner }).collect())
    }
}

#[pyclass(name = "Manifest", module = "duplex_forge")]
struct PyManifest {
    inner: Manifest,
}

fn parse_split(name: &str) -> PyResult<Split> {
    match name {
        "train" => Ok(Split::Train),
        "validation" => Ok(Split::Validation),
        "test" => Ok(Split::Test),
        other => Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    }
}

#[pymethods]
impl PyManifest {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: Manifest::load(&path).map_err(to_py)?,
        })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[getter]
    fn config_hash(&self) -> String {
        self.inner.config_hash.clone()
    }

    fn mix_ids(&self, split: &str) -> PyResult<Vec<String>> {
        let split = parse_split(split)?;
        Ok(self.inner.split(split).map(|e| e.mix_id.clone()).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.entries.len()
    }
}

/// Checks a config document and returns it with every default filled in.
#[pyfunction]
fn normalize_config(text: &str) -> PyResult<String> {
    let cfg = HarnessConfig::from_json(text).map_err(to_py)?;
    serde_json::to_string_pretty(&cfg).map_err(|e| ForgeError::new_err(e.to_string()))
}

/// Runs a pipeline command and returns its result as JSON text.
#[pyfunction]
#[pyo3(signature = (command, config, seed = None, force = false, paper_scale = false, output_root = None))]
fn run(
    py: Python<'_>,
    command: &str,
    config: PathBuf,
    seed: Option<u64>,
    force: bool,
    paper_scale: bool,
    output_root: Option<PathBuf>,
) -> PyResult<String> {
    let cfg = HarnessConfig::load(&config).map_err(to_py)?;
    let ws = Workspace::new(
        cfg,
        &RunOptions {
            seed,
            force,
            paper_scale,
            output_root,
        },
    );
    let json = |v: Result<serde_json::Value, Error>| -> PyResult<String> {
        let v = v.map_err(to_py)?;
        serde_json::to_string_pretty(&v).map_err(|e| ForgeError::new_err(e.to_string()))
    };
    let value = py.detach(|| -> Result<serde_json::Value, Error> {
        Ok(match command {
            "build-corpus" => serde_json::to_value(harness::build_corpus_cmd(&ws)?)?,
            "train" => {
                let mut out = serde_json::Map::new();
                for model in harness::MODELS {
                    let t = harness::train_cmd(&ws, model)?;
                    out.insert(
                        model.to_string(),
                        serde_json::json!({"best_epoch": t.best_epoch, "best_valid_loss": t.best_valid_loss}),
                    );
                }
                serde_json::Value::Object(out)
            }
            "evaluate" => serde_json::to_value(harness::evaluate_cmd(
                &ws,
                &harness::MODELS,
                &[MixtureKind::Synthetic, MixtureKind::Realistic],
            )?)?,
            "distance-sweep" => serde_json::to_value(harness::distance_sweep_cmd(&ws)?)?,
            "twin-experiment" => serde_json::to_value(harness::twin_experiment_cmd(&ws)?)?,
            other => return Err(Error::InvalidArgument(format!("unknown command `{other}`"))),
        })
    });
    json(value)
}

#[pymodule]
pub fn duplex_forge(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyAudioClip>()?;
    m.add_class::<PySeparator>()?;
    m.add_class::<PyManifest>()?;
    m.add_function(wrap_pyfunction!(stft_shape, m)?)?;
    m.add_function(wrap_pyfunction!(stft_magnitudes, m)?)?;
    m.add_function(wrap_pyfunction!(stft_round_trip, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr, m)?)?;
    m.add_function(wrap_pyfunction!(si_sdr_pit, m)?)?;
    m.add_function(wrap_pyfunction!(normalize_config, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add("ForgeError", m.py().get_type::<ForgeError>())?;
    m.add("ConfigError", m.py().get_type::<ConfigError>())?;
    m.add("RefusedError", m.py().get_type::<RefusedError>())?;
    Ok(())
}
