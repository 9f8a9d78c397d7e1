//! Python bindings: cost analysis, model construction and inference,
//! synthetic data, training and evaluation. Matrices cross the boundary as
//! lists of row lists.

use std::path::PathBuf;

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use hafformer::analysis::{all_combos, analyze as analyze_cfg, emit_cost_table};
use hafformer::checkpoint::{load_checkpoint, save_checkpoint};
use hafformer::data::{self, EmbeddingRecord, Split, SynthSpec};
use hafformer::training::{self, TrainOptions};
use hafformer::verify::{run_standard, Scale};
use hafformer::{
    apply_preset, ChannelMixerKind, Error, FrameMatrix, HierarchyPreset, ModelConfig, TokenMixerKind,
};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        e if e.is_numeric() => PyArithmeticError::new_err(e.to_string()),
        e => PyValueError::new_err(e.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f64>>) -> PyResult<FrameMatrix> {
    FrameMatrix::from_rows(&rows).map_err(to_py)
}

fn rows(m: &FrameMatrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

#[allow(clippy::too_many_arguments)]
fn model_config(
    token_mixer: &str,
    channel_mixer: &str,
    preset: &str,
    seq_len: usize,
    input_dim: usize,
    d_model: usize,
    channel_residual: bool,
    seed: u64,
) -> PyResult<ModelConfig> {
    let token: TokenMixerKind = token_mixer.parse().map_err(to_py)?;
    let channel: ChannelMixerKind = channel_mixer.parse().map_err(to_py)?;
    let preset: HierarchyPreset = preset.parse().map_err(to_py)?;
    let base = ModelConfig {
        seq_len,
        input_dim,
        d_model,
        channel_residual,
        seed,
        ..ModelConfig::default()
    }
    .with_mixers(token, channel);
    apply_preset(preset, &base).map_err(to_py)
}

/// Parameter and MAC totals plus the per-component breakdown.
#[pyfunction]
#[pyo3(signature = (token_mixer="msdw", channel_mixer="geglu", preset="H3_1", seq_len=3200, input_dim=1024, d_model=8))]
fn analyze<'py>(
    py: Python<'py>,
    token_mixer: &str,
    channel_mixer: &str,
    preset: &str,
    seq_len: usize,
    input_dim: usize,
    d_model: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let cfg = model_config(token_mixer, channel_mixer, preset, seq_len, input_dim, d_model, true, 0)?;
    let report = analyze_cfg(&cfg);
    let out = PyDict::new(py);
    out.set_item("params", report.total_excl_projection.params)?;
    out.set_item("macs", report.total_excl_projection.macs)?;
    out.set_item("params_incl_projection", report.total_incl_projection.params)?;
    out.set_item("macs_incl_projection", report.total_incl_projection.macs)?;
    let entries: Vec<(String, u64, u64)> = report
        .entries
        .iter()
        .map(|e| (e.component.clone(), e.params, e.macs))
        .collect();
    out.set_item("entries", entries)?;
    out.set_item("warnings", report.warnings)?;
    Ok(out)
}

/// The 24-row token x channel mixer grid as a JSON string.
#[pyfunction]
#[pyo3(signature = (preset="H3_1"))]
fn cost_table_json(preset: &str) -> PyResult<String> {
    let cfg = model_config("msdw", "geglu", preset, 3200, 1024, 8, true, 0)?;
    Ok(emit_cost_table(&cfg, &all_combos()).to_json())
}

/// Keeps the first `target_len` frames or appends zero frames.
#[pyfunction]
fn pad_or_truncate(x: Vec<Vec<f64>>, target_len: usize) -> PyResult<Vec<Vec<f64>>> {
    if target_len == 0 {
        return Err(PyValueError::new_err("target_len must be at least 1"));
    }
    Ok(rows(&data::pad_or_truncate(&matrix(x)?, target_len)))
}

#[pyfunction]
fn save_embedding(path: PathBuf, id: String, features: Vec<Vec<f64>>) -> PyResult<()> {
    let rec = EmbeddingRecord {
        id,
        features: matrix(features)?,
        label: None,
    };
    data::save_embedding(&rec, &path).map_err(to_py)
}

/// Returns `(id, features)`.
#[pyfunction]
#[pyo3(signature = (path, expected_cols=1024))]
fn load_embedding(path: PathBuf, expected_cols: usize) -> PyResult<(String, Vec<Vec<f64>>)> {
    let rec = data::load_embedding(&path, expected_cols).map_err(to_py)?;
    Ok((rec.id, rows(&rec.features)))
}

/// Runs the 25-case gradient-check suite; returns `(name, max_rel_error, passed)`.
#[pyfunction]
#[pyo3(signature = (scale="small"))]
fn gradcheck(scale: &str) -> PyResult<Vec<(String, f64, bool)>> {
    let scale = match scale {
        "small" => Scale::Small,
        "paper" => Scale::Paper,
        other => return Err(PyValueError::new_err(format!("unknown scale `{other}`"))),
    };
    Ok(run_standard(&ModelConfig::default(), scale)
        .into_iter()
        .map(|o| (o.name, o.max_rel_error.unwrap_or(f64::NAN), o.passed))
        .collect())
}

#[pyclass(name = "Dataset", module = "hafformer_py")]
struct PyDataset {
    inner: data::Dataset,
}

#[pymethods]
impl PyDataset {
    #[staticmethod]
    #[pyo3(signature = (n_per_class, seed, difficulty=1.0, input_dim=1024, max_frames=None))]
    fn synthesize(
        n_per_class: usize,
        seed: u64,
        difficulty: f64,
        input_dim: usize,
        max_frames: Option<usize>,
    ) -> PyResult<Self> {
        let spec = SynthSpec {
            n_per_class,
            seed,
            difficulty,
            input_dim,
            max_frames,
        };
        Ok(Self {
            inner: data::synthesize_dataset(&spec).map_err(to_py)?,
        })
    }

    /// Loads `manifest.csv` and its `.hafe` files from a directory.
    #[staticmethod]
    #[pyo3(signature = (path, input_dim=1024))]
    fn load_dir(path: PathBuf, input_dim: usize) -> PyResult<Self> {
        Ok(Self {
            inner: data::load_dataset_dir(&path, Split::Test, input_dim).map_err(to_py)?,
        })
    }

    fn save_dir(&self, path: PathBuf) -> PyResult<()> {
        data::save_dataset_dir(&self.inner, &path).map_err(to_py)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn ids(&self) -> Vec<String> {
        self.inner.records.iter().map(|r| r.id.clone()).collect()
    }

    fn labels(&self) -> Vec<Option<usize>> {
        self.inner.records.iter().map(|r| r.label).collect()
    }

    fn frames(&self) -> Vec<usize> {
        self.inner.records.iter().map(|r| r.features.rows()).collect()
    }

    fn features(&self, index: usize) -> PyResult<Vec<Vec<f64>>> {
        self.inner
            .records
            .get(index)
            .map(|r| rows(&r.features))
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range")))
    }
}

#[pyclass(name = "Model", module = "hafformer_py")]
struct PyModel {
    inner: hafformer::Model,
}

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (token_mixer="msdw", channel_mixer="geglu", preset="H3_1", seq_len=3200, input_dim=1024, d_model=8, channel_residual=true, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        token_mixer: &str,
        channel_mixer: &str,
        preset: &str,
        seq_len: usize,
        input_dim: usize,
        d_model: usize,
        channel_residual: bool,
        seed: u64,
    ) -> PyResult<Self> {
        let cfg = model_config(
            token_mixer,
            channel_mixer,
            preset,
            seq_len,
            input_dim,
            d_model,
            channel_residual,
            seed,
        )?;
        Ok(Self {
            inner: hafformer::Model::build(cfg).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_checkpoint(&path).map_err(to_py)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.inner, &path).map_err(to_py)
    }

    fn param_count(&self) -> usize {
        self.inner.store().scalar_count()
    }

    fn param_count_excluding_projection(&self) -> usize {
        self.inner.store().scalar_count_excluding_projection()
    }

    fn param_names(&self) -> Vec<String> {
        self.inner.store().names().map(str::to_string).collect()
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.config().seq_len
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.inner.config().input_dim
    }

    /// Logits for one `[seq_len x input_dim]` sequence.
    fn forward(&self, x: Vec<Vec<f64>>) -> PyResult<Vec<f64>> {
        let fwd = self.inner.forward(&matrix(x)?).map_err(to_py)?;
        Ok(fwd.logits.row(0).to_vec())
    }

    /// `(frames, channels)` after each stage for a zero input.
    fn stage_shapes(&self) -> PyResult<Vec<(usize, usize)>> {
        let cfg = self.inner.config();
        let x = FrameMatrix::zeros(cfg.seq_len, cfg.input_dim);
        Ok(self.inner.forward(&x).map_err(to_py)?.stage_shapes)
    }

    /// Trains in place; returns one `(epoch, mean_loss, train_acc)` tuple per epoch.
    #[pyo3(signature = (dataset, epochs=80, batch_size=8, lr=2e-3, weight_decay=1e-5, seed=0))]
    fn train(
        &mut self,
        py: Python<'_>,
        dataset: &PyDataset,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        weight_decay: f64,
        seed: u64,
    ) -> PyResult<Vec<(usize, f64, f64)>> {
        let mut opts = TrainOptions {
            epochs,
            batch_size,
            seed,
            ..TrainOptions::default()
        };
        opts.adamw.lr = lr;
        opts.adamw.weight_decay = weight_decay;
        let model = &mut self.inner;
        let ds = &dataset.inner;
        let log = py
            .detach(|| training::train(model, ds, &opts))
            .map_err(to_py)?;
        Ok(log.without_timing())
    }

    /// `{"accuracy", "f1", "confusion"}` on a labeled dataset.
    fn evaluate<'py>(&self, py: Python<'py>, dataset: &PyDataset) -> PyResult<Bound<'py, PyDict>> {
        let m = training::evaluate(&self.inner, &dataset.inner).map_err(to_py)?;
        let out = PyDict::new(py);
        out.set_item("accuracy", m.accuracy)?;
        out.set_item("f1", m.f1)?;
        out.set_item("confusion", m.confusion)?;
        Ok(out)
    }
}

#[pymodule]
fn hafformer_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(cost_table_json, m)?)?;
    m.add_function(wrap_pyfunction!(pad_or_truncate, m)?)?;
    m.add_function(wrap_pyfunction!(save_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(load_embedding, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyDataset>()?;
    Ok(())
}
