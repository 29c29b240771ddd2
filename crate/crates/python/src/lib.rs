//! Python bindings: corpus generation, configs, schedules, EER scoring,
//! training and evaluation.

use std::path::{Path, PathBuf};

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use w2v2_speaker::audio::{parse_trials, read_manifest, TrialLabel, MANIFEST_FILE};
use w2v2_speaker::cli::{self, EvaluateArgs, Failure};
use w2v2_speaker::config::RunConfig;
use w2v2_speaker::encoder::{output_length as encoder_output_length, EncoderConfig};
use w2v2_speaker::eval;
use w2v2_speaker::heads::Variant;
use w2v2_speaker::pooling::PoolingMethod;
use w2v2_speaker::schedule::{ScheduleKind, ScheduleSpec};
use w2v2_speaker::train::{ablation_names as core_ablation_names, run_ablation};
use w2v2_speaker::Error;

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } | Error::Wav { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn failure(f: Failure) -> PyErr {
    PyRuntimeError::new_err(format!("{} (exit code {})", f.message, f.code))
}

fn parse_pooling(name: &str) -> PyResult<PoolingMethod> {
    name.parse().map_err(to_py)
}

/// A resolved run configuration.
#[pyclass(name = "Config", module = "w2v2_speaker_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (text = "", base_dir = "."))]
    fn new(text: &str, base_dir: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::parse(text, Path::new(base_dir)).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(to_py)?,
        })
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        self.inner.write(&path).map_err(to_py)
    }

    /// The config with the named ablation applied.
    fn ablation(&self, name: &str) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig {
                train: run_ablation(&self.inner.train, name).map_err(to_py)?,
                ..self.inner.clone()
            },
        })
    }

    /// Keys whose values differ from `other`.
    fn changed_keys(&self, other: &PyConfig) -> Vec<String> {
        w2v2_speaker::config::changed_keys(&self.inner, &other.inner)
    }

    fn problems(&self) -> Vec<String> {
        self.inner.problems()
    }

    #[getter]
    fn variant(&self) -> &'static str {
        self.inner.train.variant.name()
    }

    #[getter]
    fn pooling(&self) -> &'static str {
        self.inner.train.pooling.name()
    }

    #[setter]
    fn set_pooling(&mut self, name: &str) -> PyResult<()> {
        self.inner.train.pooling = parse_pooling(name)?;
        Ok(())
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.train.iterations
    }

    #[setter]
    fn set_iterations(&mut self, n: usize) {
        self.inner.train.iterations = n;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.train.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.train.seed = seed;
    }

    #[getter]
    fn out(&self) -> Option<PathBuf> {
        self.inner.out.clone()
    }

    #[setter]
    fn set_out(&mut self, out: Option<PathBuf>) {
        self.inner.out = out;
    }

    fn __repr__(&self) -> String {
        format!(
            "Config(variant={}, pooling={}, iterations={})",
            self.variant(),
            self.pooling(),
            self.iterations()
        )
    }
}

/// A learning-rate schedule over a fixed number of steps.
#[pyclass(name = "Schedule", module = "w2v2_speaker_py", frozen)]
struct PySchedule {
    inner: ScheduleSpec,
}

impl PySchedule {
    fn make(kind: ScheduleKind, total_steps: usize) -> PyResult<Self> {
        Ok(Self {
            inner: ScheduleSpec::new(kind, total_steps).map_err(to_py)?,
        })
    }
}

#[pymethods]
impl PySchedule {
    #[staticmethod]
    fn constant(lr: f64, total_steps: usize) -> PyResult<Self> {
        Self::make(ScheduleKind::Constant { lr }, total_steps)
    }

    #[staticmethod]
    fn exponential_decay(lr_start: f64, lr_end: f64, total_steps: usize) -> PyResult<Self> {
        Self::make(ScheduleKind::ExponentialDecay { lr_start, lr_end }, total_steps)
    }

    #[staticmethod]
    fn one_cycle(max_lr: f64, total_steps: usize) -> PyResult<Self> {
        Self::make(ScheduleKind::one_cycle(max_lr), total_steps)
    }

    #[staticmethod]
    fn tri_stage(
        lr_floor_init: f64,
        lr_peak: f64,
        lr_floor_final: f64,
        warmup_steps: usize,
        hold_steps: usize,
        total_steps: usize,
    ) -> PyResult<Self> {
        Self::make(
            ScheduleKind::TriStage {
                lr_floor_init,
                lr_peak,
                lr_floor_final,
                warmup_steps,
                hold_steps,
            },
            total_steps,
        )
    }

    fn lr_at(&self, step: usize) -> PyResult<f64> {
        self.inner.lr_at(step).map_err(to_py)
    }

    fn values(&self) -> PyResult<Vec<f64>> {
        (0..self.inner.total_steps).map(|k| self.lr_at(k)).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.total_steps
    }
}

/// EER and threshold of same-speaker and different-speaker scores.
#[pyfunction]
fn compute_eer(same: Vec<f64>, different: Vec<f64>) -> PyResult<(f64, f64)> {
    let scored: Vec<(f64, TrialLabel)> = same
        .into_iter()
        .map(|s| (s, TrialLabel::Same))
        .chain(different.into_iter().map(|s| (s, TrialLabel::Different)))
        .collect();
    let r = eval::compute_eer_from(&scored).map_err(to_py)?;
    Ok((r.eer, r.threshold))
}

#[pyfunction]
fn cosine(a: Vec<f64>, b: Vec<f64>) -> PyResult<f64> {
    eval::cosine(&a, &b).map_err(to_py)
}

/// Frames the default feature extractor produces from `samples` samples.
#[pyfunction]
fn output_length(samples: usize) -> PyResult<usize> {
    encoder_output_length(samples, &EncoderConfig::default()).map_err(to_py)
}

#[pyfunction]
fn pooling_methods() -> Vec<&'static str> {
    PoolingMethod::ALL.iter().map(|m| m.name()).collect()
}

#[pyfunction]
fn pooling_output_dim(method: &str, model_dim: usize) -> PyResult<usize> {
    Ok(parse_pooling(method)?.output_dim(model_dim))
}

#[pyfunction]
fn variants() -> Vec<&'static str> {
    [Variant::Ce, Variant::Aam, Variant::Bce].iter().map(|v| v.name()).collect()
}

#[pyfunction]
fn ablation_names() -> Vec<&'static str> {
    core_ablation_names()
}

/// Writes a synthetic corpus with validation and test trial lists; returns
/// `(utterance_id, speaker_id, path)` per utterance.
#[pyfunction]
#[allow(clippy::too_many_arguments)]
#[pyo3(signature = (out, speakers = 20, utts = 10, duration = 3.0, seed = 1, trials_per_class = 5000, force = false))]
fn generate_corpus(
    py: Python<'_>,
    out: PathBuf,
    speakers: usize,
    utts: usize,
    duration: f64,
    seed: u64,
    trials_per_class: usize,
    force: bool,
) -> PyResult<Vec<(String, String, PathBuf)>> {
    py.detach(|| cli::cmd_generate_corpus(&out, speakers, utts, duration, seed, trials_per_class, force))
        .map_err(failure)?;
    let manifest = read_manifest(&out.join(MANIFEST_FILE)).map_err(to_py)?;
    Ok(manifest
        .into_iter()
        .map(|e| (e.utterance_id, e.speaker_id, out.join(e.path)))
        .collect())
}

/// `(label, a, b)` with label 1 for same speaker.
#[pyfunction]
fn read_trials(path: PathBuf) -> PyResult<Vec<(u8, String, String)>> {
    let list = parse_trials(&path).map_err(to_py)?;
    Ok(list
        .trials
        .into_iter()
        .map(|t| (t.label.as_digit(), t.a, t.b))
        .collect())
}

/// Trains `config` and returns the output directory.
#[pyfunction]
fn train(py: Python<'_>, config: &PyConfig) -> PyResult<PathBuf> {
    let cfg = config.inner.clone();
    py.detach(|| cli::cmd_train(&cfg)).map_err(failure)
}

/// Scores a trial list with a checkpoint; returns one EER per repeat.
#[pyfunction]
#[pyo3(signature = (checkpoint, trials = None, corpus = None, pooling = None, repeats = 1, out = None, seed = None, config = None))]
#[allow(clippy::too_many_arguments)]
fn evaluate(
    py: Python<'_>,
    checkpoint: PathBuf,
    trials: Option<PathBuf>,
    corpus: Option<PathBuf>,
    pooling: Option<&str>,
    repeats: usize,
    out: Option<PathBuf>,
    seed: Option<u64>,
    config: Option<PathBuf>,
) -> PyResult<Vec<f64>> {
    let args = EvaluateArgs {
        checkpoint,
        config,
        trials,
        corpus,
        pooling: pooling.map(parse_pooling).transpose()?,
        repeats,
        out,
        seed,
    };
    py.detach(|| cli::cmd_evaluate(&args)).map_err(failure)
}

/// Runs the command-line interface with `args` (without the program name)
/// and returns its exit status.
#[pyfunction]
fn run_cli(py: Python<'_>, args: Vec<String>) -> i32 {
    let argv: Vec<String> = std::iter::once("w2v2-speaker".to_string()).chain(args).collect();
    py.detach(|| cli::run(argv))
}

#[pymodule]
fn w2v2_speaker_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PySchedule>()?;
    m.add_function(wrap_pyfunction!(compute_eer, m)?)?;
    m.add_function(wrap_pyfunction!(cosine, m)?)?;
    m.add_function(wrap_pyfunction!(output_length, m)?)?;
    m.add_function(wrap_pyfunction!(pooling_methods, m)?)?;
    m.add_function(wrap_pyfunction!(pooling_output_dim, m)?)?;
    m.add_function(wrap_pyfunction!(variants, m)?)?;
    m.add_function(wrap_pyfunction!(ablation_names, m)?)?;
    m.add_function(wrap_pyfunction!(generate_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(read_trials, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    m.add("SAMPLE_RATE", w2v2_speaker::audio::SAMPLE_RATE)?;
    Ok(())
}
