//! Python bindings for adave-core.
//!
//! Matrices cross the boundary as flat row-major lists of floats; configs
//! and reports cross as JSON strings.

use std::path::PathBuf;

use adave_core::attention::{self, attention_flops, build_sparse_kv, extend_kv_full, FrameKv};
use adave_core::bench::{self, BenchConfig};
use adave_core::error::{Error, ErrorClass};
use adave_core::media::{otsu_threshold, GrayImage, Otsu};
use adave_core::pipeline::{self, load_input_frames, EditConfig};
use adave_core::{CacheKey, MaskPyramid, MotionMask, TokenMatrix};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

fn py_err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Io => PyIOError::new_err(e.to_string()),
        ErrorClass::Validation => PyValueError::new_err(e.to_string()),
        ErrorClass::Internal => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json<T: serde::Serialize>(value: &T) -> PyResult<String> {
    serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

/// Gathered keys and values with `(frame, position)` provenance.
#[pyclass(name = "SparseKV", module = "adave", frozen)]
struct PySparseKV(attention::SparseKV);

#[pymethods]
impl PySparseKV {
    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        attention::SparseKV::from_bytes(data).map(Self).map_err(py_err)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &self.0.to_bytes())
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dim()
    }

    #[getter]
    fn payload_bytes(&self) -> usize {
        self.0.payload_bytes()
    }

    fn keys(&self) -> Vec<f32> {
        self.0.keys().to_vec()
    }

    fn values(&self) -> Vec<f32> {
        self.0.values().to_vec()
    }

    fn provenance(&self) -> Vec<(u32, u32)> {
        self.0.provenance().iter().map(|p| (p.frame, p.position)).collect()
    }

    fn source_frames(&self) -> Vec<u32> {
        self.0.source_frames().into_iter().collect()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.0 == other.0
    }

    fn __repr__(&self) -> String {
        format!("SparseKV(len={}, dim={})", self.0.len(), self.0.dim())
    }
}

/// A sealed cache of sparse KVs keyed by `(timestep, block)`.
#[pyclass(name = "KVCache", module = "adave", frozen)]
struct PyKVCache(adave_core::KVCache);

#[pymethods]
impl PyKVCache {
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        adave_core::KVCache::load(&dir).map(Self).map_err(py_err)
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        self.0.save(&dir).map_err(py_err)
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn keys(&self) -> Vec<(u32, u32)> {
        self.0.keys().map(|k| (k.timestep, k.block)).collect()
    }

    fn get(&self, timestep: u32, block: u32) -> PyResult<PySparseKV> {
        self.0.get(CacheKey::new(timestep, block)).map(|kv| PySparseKV(kv.clone())).map_err(py_err)
    }

    /// Byte accounting as JSON, with an optional frame-budget inversion
    /// `(budget_bytes, tokens_per_frame, dim, density, r)`.
    #[pyo3(signature = (budget=None))]
    fn memory_report(&self, budget: Option<(usize, usize, usize, f64, usize)>) -> PyResult<String> {
        json(&bench::memory_report(&self.0, budget).map_err(py_err)?)
    }
}

fn matrix(data: Vec<f32>, rows: usize) -> PyResult<TokenMatrix> {
    if rows == 0 || !data.len().is_multiple_of(rows) {
        return Err(PyValueError::new_err(format!("{} values do not split into {rows} rows", data.len())));
    }
    let cols = data.len() / rows;
    TokenMatrix::new(rows, cols, data).map_err(py_err)
}

type PyFrameKv = (u32, Vec<f32>, Vec<f32>);

fn frame_matrices(frames: Vec<PyFrameKv>, tokens: usize) -> PyResult<Vec<(u32, TokenMatrix, TokenMatrix)>> {
    frames.into_iter().map(|(i, k, v)| Ok((i, matrix(k, tokens)?, matrix(v, tokens)?))).collect()
}

/// 1-based reference frame indices for `total` frames at interval `interval`.
#[pyfunction]
fn select_reference_frames(total: usize, interval: usize) -> Vec<usize> {
    pipeline::select_reference_frames(total, interval)
}

/// Reference positions whose every token enters the sparse KV.
#[pyfunction]
fn full_frame_indices(z: usize, r: usize) -> Vec<usize> {
    attention::full_frame_indices(z, r).into_iter().collect()
}

/// Processing order of the frames not in `scheduled`.
#[pyfunction]
fn hierarchical_order(total: usize, scheduled: Vec<usize>) -> Vec<usize> {
    pipeline::hierarchical_order(total, &scheduled)
}

/// Sparse KV length for per-position moving-cell counts `popcounts[i - 2]`.
#[pyfunction]
fn kv_token_count(z: usize, tokens_per_frame: usize, popcounts: Vec<usize>, r: usize) -> PyResult<usize> {
    attention::kv_token_count(z, tokens_per_frame, &popcounts, r).map(|c| c.kv_tokens).map_err(py_err)
}

#[pyfunction(name = "attention_flops")]
fn py_attention_flops(query_tokens: usize, kv_tokens: usize, dim: usize) -> u64 {
    attention_flops(query_tokens, kv_tokens, dim)
}

#[pyfunction]
fn kv_bytes(kv_tokens: usize, dim: usize) -> usize {
    bench::kv_bytes(kv_tokens, dim)
}

/// Largest reference count whose sparse KV fits in `budget_bytes`.
#[pyfunction]
fn max_frames_under_budget(budget_bytes: usize, tokens_per_frame: usize, dim: usize, density: f64, r: usize) -> usize {
    bench::max_frames_under_budget(budget_bytes, tokens_per_frame, dim, density, r)
}

/// Otsu threshold of 8-bit values: `("threshold", t)` or `("degenerate", v)`.
#[pyfunction]
fn otsu(values: Vec<u8>) -> PyResult<(&'static str, u8)> {
    let n = values.len();
    let image = GrayImage::new(n, 1, values).map_err(py_err)?;
    Ok(match otsu_threshold(&image) {
        Otsu::Threshold(t) => ("threshold", t),
        Otsu::Degenerate(v) => ("degenerate", v),
    })
}

/// Gather a sparse KV at resolution `res`.
///
/// `frames` holds `(frame_index, keys, values)` with `tokens` rows each;
/// `masks` holds `(reference_position, rows, cols, bits)`.
#[pyfunction]
#[pyo3(signature = (frames, tokens, masks, res, r))]
fn build_sparse(
    frames: Vec<PyFrameKv>,
    tokens: usize,
    masks: Vec<(u32, usize, usize, Vec<bool>)>,
    res: usize,
    r: usize,
) -> PyResult<PySparseKV> {
    let mats = frame_matrices(frames, tokens)?;
    let kv: Vec<FrameKv<'_>> = mats.iter().map(|(i, k, v)| FrameKv { frame_index: *i, keys: k, values: v }).collect();
    let mut pyramid = MaskPyramid::new();
    for (pos, rows, cols, bits) in masks {
        pyramid.insert(MotionMask::new(pos, rows, cols, bits).map_err(py_err)?).map_err(py_err)?;
    }
    build_sparse_kv(&kv, &pyramid, res, r).map(PySparseKV).map_err(py_err)
}

/// Concatenate every token of every frame.
#[pyfunction]
fn extend_full(frames: Vec<PyFrameKv>, tokens: usize) -> PyResult<PySparseKV> {
    let mats = frame_matrices(frames, tokens)?;
    let kv: Vec<FrameKv<'_>> = mats.iter().map(|(i, k, v)| FrameKv { frame_index: *i, keys: k, values: v }).collect();
    extend_kv_full(&kv).map(PySparseKV).map_err(py_err)
}

/// Attention of `rows` query rows against a gathered KV; flat output.
#[pyfunction]
fn sesa(py: Python<'_>, queries: Vec<f32>, rows: usize, kv: &Bound<'_, PySparseKV>, heads: usize) -> PyResult<Vec<f32>> {
    let q = matrix(queries, rows)?;
    let kv = &kv.get().0;
    py.detach(|| attention::sesa(&q, kv, heads)).map(TokenMatrix::into_data).map_err(py_err)
}

/// Same kernel as [`sesa`], for intermediate frames against a cached KV.
#[pyfunction]
fn ifsa(py: Python<'_>, queries: Vec<f32>, rows: usize, kv: &Bound<'_, PySparseKV>, heads: usize) -> PyResult<Vec<f32>> {
    let q = matrix(queries, rows)?;
    let kv = &kv.get().0;
    py.detach(|| attention::ifsa(&q, kv, heads)).map(TokenMatrix::into_data).map_err(py_err)
}

/// Run the editing pipeline on a JSON config; returns `(report_json, latents)`
/// with latents as concatenated little-endian `f32`.
#[pyfunction]
#[pyo3(signature = (config_json, cache_dir=None))]
fn run_pipeline<'py>(
    py: Python<'py>,
    config_json: &str,
    cache_dir: Option<PathBuf>,
) -> PyResult<(String, Bound<'py, PyBytes>)> {
    let cfg = EditConfig::from_json(config_json).map_err(py_err)?;
    let out = py
        .detach(|| {
            let frames = load_input_frames(&cfg)?;
            let out = pipeline::run_pipeline(&cfg, &frames)?;
            if let Some(dir) = &cache_dir {
                out.cache.save(dir)?;
            }
            Ok(out)
        })
        .map_err(py_err)?;
    Ok((json(&out.report)?, PyBytes::new(py, &out.output_bytes())))
}

/// Time full against sparse attention for a JSON bench config; returns the
/// report as JSON.
#[pyfunction]
fn bench_attention(py: Python<'_>, config_json: &str) -> PyResult<String> {
    let cfg: BenchConfig =
        serde_json::from_str(config_json).map_err(|e| PyValueError::new_err(format!("bench config: {e}")))?;
    let report = py.detach(|| bench::bench_attention(&cfg)).map_err(py_err)?;
    json(&report)
}

#[pymodule]
fn adave(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySparseKV>()?;
    m.add_class::<PyKVCache>()?;
    m.add_function(wrap_pyfunction!(select_reference_frames, m)?)?;
    m.add_function(wrap_pyfunction!(full_frame_indices, m)?)?;
    m.add_function(wrap_pyfunction!(hierarchical_order, m)?)?;
    m.add_function(wrap_pyfunction!(kv_token_count, m)?)?;
    m.add_function(wrap_pyfunction!(py_attention_flops, m)?)?;
    m.add_function(wrap_pyfunction!(kv_bytes, m)?)?;
    m.add_function(wrap_pyfunction!(max_frames_under_budget, m)?)?;
    m.add_function(wrap_pyfunction!(otsu, m)?)?;
    m.add_function(wrap_pyfunction!(build_sparse, m)?)?;
    m.add_function(wrap_pyfunction!(extend_full, m)?)?;
    m.add_function(wrap_pyfunction!(sesa, m)?)?;
    m.add_function(wrap_pyfunction!(ifsa, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    m.add_function(wrap_pyfunction!(bench_attention, m)?)?;
    Ok(())
}
