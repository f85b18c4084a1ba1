//! Warp error, exact KV token/FLOP/byte accounting, and wall-clock timing
//! of sparse versus fully extended attention.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_flops, build_sparse_kv, extend_kv_full, full_frame_indices, kv_token_count, sesa, FrameKv,
    SparseKV, TokenMatrix, SPARSE_KV_HEADER_BYTES,
};
use crate::cache::{CacheStats, KVCache};
use crate::error::{Error, Result};
use crate::flow::{warp_bilinear, FlowField};
use crate::masks::{MaskPyramid, MotionMask};
use crate::media::Frame;

// ---------------------------------------------------------------------------
// Warp error
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarpError {
    /// Mean absolute difference per pixel and channel, 8-bit units.
    pub mean_abs_diff: f64,
    /// `mean_abs_diff` as a percentage of full scale.
    pub scaled_x100: f64,
}

/// Temporal consistency: `flows[i]` is the forward flow from frame `i` to
/// frame `i + 1`, so warping frame `i + 1` back by it should reproduce
/// frame `i`. Averaged over pairs.
pub fn warp_error(frames: &[Frame], flows: &[FlowField]) -> Result<WarpError> {
    if frames.len() < 2 || flows.len() + 1 != frames.len() {
        return Err(Error::Shape(format!(
            "warp error needs N >= 2 frames and N-1 flows, got {} and {}",
            frames.len(),
            flows.len()
        )));
    }
    let mut total = 0f64;
    for (i, flow) in flows.iter().enumerate() {
        let (prev, next) = (&frames[i], &frames[i + 1]);
        if (prev.width(), prev.height()) != (next.width(), next.height()) {
            return Err(Error::Shape(format!("frame {} and {} differ in size", i, i + 1)));
        }
        let warped = warp_bilinear(next, flow)?;
        let sum: u64 = warped
            .pixels()
            .iter()
            .zip(prev.pixels())
            .map(|(a, b)| (0..3).map(|c| a[c].abs_diff(b[c]) as u64).sum::<u64>())
            .sum();
        total += sum as f64 / (prev.pixels().len() * 3) as f64;
    }
    let mean = total / flows.len() as f64;
    Ok(WarpError { mean_abs_diff: mean, scaled_x100: mean / 255.0 * 100.0 })
}

// ---------------------------------------------------------------------------
// Memory accounting
// ---------------------------------------------------------------------------

/// Serialized size of one KV of `len` tokens at width `dim`.
pub fn kv_bytes(len: usize, dim: usize) -> usize {
    SPARSE_KV_HEADER_BYTES + 2 * len * dim * 4 + 8 * len
}

/// Moving tokens per masked frame at density `rho`, rounded half up.
pub fn masked_popcount(tokens_per_frame: usize, density: f64) -> usize {
    (density * tokens_per_frame as f64 + 0.5).floor() as usize
}

/// `L(Z)` with every masked frame at density `rho`.
pub fn sparse_kv_tokens(z: usize, tokens_per_frame: usize, density: f64, r: usize) -> usize {
    let full = full_frame_indices(z, r).len();
    full * tokens_per_frame + (z - full) * masked_popcount(tokens_per_frame, density)
}

pub const MAX_BUDGET_FRAMES: usize = 1 << 20;

/// Largest `Z` whose sparse KV fits in `budget_bytes`; 0 if even one frame
/// does not fit. Capped at [`MAX_BUDGET_FRAMES`] when the cost stops growing.
pub fn max_frames_under_budget(budget_bytes: usize, tokens_per_frame: usize, dim: usize, density: f64, r: usize) -> usize {
    let mut best = 0;
    for z in 1..=MAX_BUDGET_FRAMES {
        if kv_bytes(sparse_kv_tokens(z, tokens_per_frame, density, r), dim) > budget_bytes {
            break;
        }
        best = z;
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetQuery {
    pub budget_bytes: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    pub density: f64,
    pub r: usize,
    pub max_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub cache: CacheStats,
    pub budget: Option<BudgetQuery>,
}

/// Exact byte totals of a sealed cache, plus the frame count admissible
/// under an optional `(budget, T, d, ρ, r)` query.
pub fn memory_report(cache: &KVCache, budget: Option<(usize, usize, usize, f64, usize)>) -> Result<MemoryReport> {
    if !cache.is_sealed() {
        return Err(crate::error::CacheError::NotSealed.into());
    }
    Ok(MemoryReport {
        cache: cache.stats(),
        budget: budget.map(|(budget_bytes, t, d, density, r)| BudgetQuery {
            budget_bytes,
            tokens_per_frame: t,
            dim: d,
            density,
            r,
            max_frames: max_frames_under_budget(budget_bytes, t, d, density, r),
        }),
    })
}

// ---------------------------------------------------------------------------
// Latency benchmark
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub z: usize,
    pub tokens_per_frame: usize,
    pub dim: usize,
    #[serde(default = "one")]
    pub heads: usize,
    pub r: usize,
    pub density: f64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_warmup")]
    pub warmup: usize,
    /// Query rows timed per call; `None` means a whole frame.
    #[serde(default)]
    pub query_tokens: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Also time with a multi-threaded pool of this size.
    #[serde(default)]
    pub multi_workers: Option<usize>,
}

fn one() -> usize {
    1
}

fn default_repetitions() -> usize {
    5
}

fn default_warmup() -> usize {
    3
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.z == 0 || self.tokens_per_frame == 0 || self.dim == 0 || self.r == 0 {
            return bad("z, tokens_per_frame, dim and r must be positive".into());
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return bad(format!("dim {} not divisible into {} heads", self.dim, self.heads));
        }
        if !(0.0..=1.0).contains(&self.density) {
            return bad(format!("density {} outside [0, 1]", self.density));
        }
        if self.repetitions < 3 {
            return bad("repetitions must be >= 3".into());
        }
        if self.warmup < 3 {
            return bad("warmup must be >= 3".into());
        }
        if self.query_tokens == Some(0) {
            return bad("query_tokens must be positive".into());
        }
        if self.multi_workers == Some(0) {
            return bad("multi_workers must be positive".into());
        }
        Ok(())
    }

    pub fn query_rows(&self) -> usize {
        self.query_tokens.unwrap_or(self.tokens_per_frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub samples_ms: Vec<f64>,
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

impl LatencyStats {
    pub fn from_samples(samples_ms: Vec<f64>) -> Self {
        let mut sorted = samples_ms.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        Self {
            median_ms: percentile(&sorted, 0.5),
            p10_ms: percentile(&sorted, 0.1),
            p90_ms: percentile(&sorted, 0.9),
            samples_ms,
        }
    }
}

/// Linear-interpolated percentile of sorted data.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeTiming {
    pub workers: usize,
    pub full: LatencyStats,
    pub sparse: LatencyStats,
    /// `sparse.median / full.median`
    pub latency_ratio: f64,
    /// `full.median / sparse.median`
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub cpu_model: String,
    pub available_parallelism: usize,
    pub os: String,
    pub arch: String,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu_model,
            available_parallelism: std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
        }
    }
}

/// Model-scale latency multipliers reported for 40-frame joint editing with
/// a full extension (`s = 1`); context only, not reproduced here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelScaleReference {
    pub full_extension_latency: f64,
    pub adaptive_latency: f64,
    pub speedup: f64,
}

impl Default for ModelScaleReference {
    fn default() -> Self {
        Self { full_extension_latency: 13.6, adaptive_latency: 3.5, speedup: 13.6 / 3.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub environment: Environment,
    pub kv_tokens_full: usize,
    pub kv_tokens_sparse: usize,
    pub token_ratio: f64,
    pub flops_full: u64,
    pub flops_sparse: u64,
    pub flops_ratio: f64,
    pub kv_bytes_full: usize,
    pub kv_bytes_sparse: usize,
    pub single_worker: ModeTiming,
    pub multi_worker: Option<ModeTiming>,
    pub model_scale_reference: ModelScaleReference,
}

/// Seeded inputs of one benchmark configuration.
pub struct BenchInputs {
    pub queries: TokenMatrix,
    pub full: SparseKV,
    pub sparse: SparseKV,
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenMatrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    TokenMatrix::new(rows, cols, data).expect("finite random data")
}

pub fn bench_inputs(cfg: &BenchConfig) -> Result<BenchInputs> {
    cfg.validate()?;
    let (t, d) = (cfg.tokens_per_frame, cfg.dim);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let keys: Vec<TokenMatrix> = (0..cfg.z).map(|_| random_matrix(&mut rng, t, d)).collect();
    let values: Vec<TokenMatrix> = (0..cfg.z).map(|_| random_matrix(&mut rng, t, d)).collect();
    let queries = random_matrix(&mut rng, cfg.query_rows(), d);

    let ones = masked_popcount(t, cfg.density);
    let mut masks = MaskPyramid::new();
    for i in 2..=cfg.z as u32 {
        let mut bits = vec![false; t];
        let mut positions: Vec<usize> = (0..t).collect();
        rand::seq::SliceRandom::shuffle(positions.as_mut_slice(), &mut rng);
        for &p in &positions[..ones] {
            bits[p] = true;
        }
        masks.insert(MotionMask::new(i, t, 1, bits)?)?;
    }
    let frames: Vec<FrameKv> = keys
        .iter()
        .zip(&values)
        .enumerate()
        .map(|(i, (k, v))| FrameKv { frame_index: i as u32 + 1, keys: k, values: v })
        .collect();
    Ok(BenchInputs {
        queries,
        full: extend_kv_full(&frames)?,
        sparse: build_sparse_kv(&frames, &masks, t, cfg.r)?,
    })
}

fn time_modes(cfg: &BenchConfig, inputs: &BenchInputs, workers: usize) -> Result<ModeTiming> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    pool.install(|| {
        let run = |kv: &SparseKV| -> Result<f64> {
            let start = Instant::now();
            let out = sesa(&inputs.queries, kv, cfg.heads)?;
            let elapsed = start.elapsed().as_secs_f64() * 1e3;
            std::hint::black_box(out);
            Ok(elapsed)
        };
        for _ in 0..cfg.warmup {
            run(&inputs.full)?;
            run(&inputs.sparse)?;
        }
        let (mut full, mut sparse) = (Vec::new(), Vec::new());
        for _ in 0..cfg.repetitions {
            full.push(run(&inputs.full)?);
            sparse.push(run(&inputs.sparse)?);
        }
        let (full, sparse) = (LatencyStats::from_samples(full), LatencyStats::from_samples(sparse));
        Ok(ModeTiming {
            workers,
            latency_ratio: sparse.median_ms / full.median_ms,
            speedup: full.median_ms / sparse.median_ms,
            full,
            sparse,
        })
    })
}

/// Times SESA over the fully extended KV and over a sparse KV at density
/// `ρ` with full-frame interval `r`, on identical queries.
pub fn bench_attention(cfg: &BenchConfig) -> Result<BenchReport> {
    let inputs = bench_inputs(cfg)?;
    let (t, d) = (cfg.tokens_per_frame, cfg.dim);
    let popcounts = vec![masked_popcount(t, cfg.density); cfg.z.saturating_sub(1)];
    let modeled = kv_token_count(cfg.z, t, &popcounts, cfg.r)?;
    if modeled.kv_tokens != inputs.sparse.len() {
        return Err(Error::Invariant(format!(
            "cost model L={} disagrees with gathered L={}",
            modeled.kv_tokens,
            inputs.sparse.len()
        )));
    }
    let (l_full, l_sparse) = (inputs.full.len(), inputs.sparse.len());
    let tq = cfg.query_rows();
    let single_worker = time_modes(cfg, &inputs, 1)?;
    let multi_worker = cfg.multi_workers.map(|w| time_modes(cfg, &inputs, w)).transpose()?;
    let report = BenchReport {
        config: cfg.clone(),
        environment: Environment::detect(),
        kv_tokens_full: l_full,
        kv_tokens_sparse: l_sparse,
        token_ratio: l_sparse as f64 / l_full as f64,
        flops_full: attention_flops(tq, l_full, d),
        flops_sparse: attention_flops(tq, l_sparse, d),
        flops_ratio: attention_flops(tq, l_sparse, d) as f64 / attention_flops(tq, l_full, d) as f64,
        kv_bytes_full: inputs.full.serialized_len(),
        kv_bytes_sparse: inputs.sparse.serialized_len(),
        single_worker,
        multi_worker,
        model_scale_reference: ModelScaleReference::default(),
    };
    log::info!(
        "bench Z={} T={} d={} r={} rho={}: L {} vs {}, speedup {:.2}x",
        cfg.z,
        t,
        d,
        cfg.r,
        cfg.density,
        l_sparse,
        l_full,
        report.single_worker.speedup
    );
    Ok(report)
}

/// Counts adjacent pairs (ordered by sparse `L`) where the median sparse
/// latency drops by more than `tolerance` relative to its predecessor.
/// Returns `(violations, pairs)`.
pub fn latency_monotonicity(reports: &[BenchReport], tolerance: f64) -> (usize, usize) {
    let mut points: Vec<(usize, f64)> = reports
        .iter()
        .map(|r| (r.kv_tokens_sparse, r.single_worker.sparse.median_ms))
        .collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let pairs = points.len().saturating_sub(1);
    let violations = points
        .windows(2)
        .filter(|w| w[1].0 > w[0].0 && w[1].1 < w[0].1 * (1.0 - tolerance))
        .count();
    (violations, pairs)
}

pub const CSV_HEADER: &str = "z,tokens_per_frame,dim,heads,r,density,query_tokens,kv_tokens_full,kv_tokens_sparse,token_ratio,flops_full,flops_sparse,kv_bytes_full,kv_bytes_sparse,workers,full_median_ms,full_p10_ms,full_p90_ms,sparse_median_ms,sparse_p10_ms,sparse_p90_ms,speedup";

impl BenchReport {
    /// One CSV row per timing mode, matching [`CSV_HEADER`].
    pub fn csv_rows(&self) -> Vec<String> {
        let c = &self.config;
        std::iter::once(&self.single_worker)
            .chain(self.multi_worker.as_ref())
            .map(|m| {
                format!(
                    "{},{},{},{},{},{},{},{},{},{:.6},{},{},{},{},{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    c.z,
                    c.tokens_per_frame,
                    c.dim,
                    c.heads,
                    c.r,
                    c.density,
                    c.query_rows(),
                    self.kv_tokens_full,
                    self.kv_tokens_sparse,
                    self.token_ratio,
                    self.flops_full,
                    self.flops_sparse,
                    self.kv_bytes_full,
                    self.kv_bytes_sparse,
                    m.workers,
                    m.full.median_ms,
                    m.full.p10_ms,
                    m.full.p90_ms,
                    m.sparse.median_ms,
                    m.sparse.p10_ms,
                    m.sparse.p90_ms,
                    m.speedup
                )
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, seed: u64) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(w, h, (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect()).unwrap()
    }

    #[test]
    fn warp_error_zero_and_offset() {
        let f = noise(12, 9, 1);
        let zero = FlowField::zeros(12, 9).unwrap();
        let e = warp_error(&[f.clone(), f.clone()], std::slice::from_ref(&zero)).unwrap();
        assert_eq!(e.mean_abs_diff, 0.0);

        let a = Frame::filled(4, 4, [20, 30, 40]).unwrap();
        let b = Frame::filled(4, 4, [30, 40, 50]).unwrap();
        let z4 = FlowField::zeros(4, 4).unwrap();
        let e = warp_error(&[a, b], &[z4]).unwrap();
        assert_eq!(e.mean_abs_diff, 10.0);
        assert!((e.scaled_x100 - 1000.0 / 255.0).abs() < 1e-12);
    }

    #[test]
    fn warp_error_shape_errors() {
        let f = noise(4, 4, 2);
        assert!(warp_error(std::slice::from_ref(&f), &[]).is_err());
        assert!(warp_error(&[f.clone(), f.clone()], &[]).is_err());
        let bad = FlowField::zeros(5, 4).unwrap();
        assert!(warp_error(&[f.clone(), f], &[bad]).is_err());
    }

    #[test]
    fn budget_inversion() {
        let full20 = kv_bytes(20 * 1024, 64);
        let z = max_frames_under_budget(full20, 1024, 64, 0.125, 8);
        assert_eq!(z, 80);
        assert_eq!(max_frames_under_budget(full20, 1024, 64, 1.0, 1), 20);
        assert_eq!(max_frames_under_budget(10, 1024, 64, 0.5, 2), 0);
    }

    #[test]
    fn sparse_token_formula() {
        assert_eq!(sparse_kv_tokens(8, 64, 0.25, 4), 272);
        assert_eq!(sparse_kv_tokens(20, 1024, 0.125, 8), 6144);
        assert_eq!(masked_popcount(4096, 0.15), 614);
    }

    #[test]
    fn percentiles() {
        let s = LatencyStats::from_samples(vec![5.0, 1.0, 3.0, 2.0, 4.0]);
        assert_eq!(s.median_ms, 3.0);
        assert!((s.p10_ms - 1.4).abs() < 1e-12);
        assert!((s.p90_ms - 4.6).abs() < 1e-12);
    }

    #[test]
    fn bench_config_validation() {
        let mut c = BenchConfig {
            z: 4,
            tokens_per_frame: 16,
            dim: 8,
            heads: 1,
            r: 2,
            density: 0.5,
            repetitions: 3,
            warmup: 3,
            query_tokens: None,
            seed: 0,
            multi_workers: None,
        };
        c.validate().unwrap();
        c.repetitions = 2;
        assert!(c.validate().is_err());
        c.repetitions = 3;
        c.density = 1.5;
        assert!(c.validate().is_err());
        c.density = 0.5;
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn small_bench_report_is_consistent() {
        let cfg = BenchConfig {
            z: 4,
            tokens_per_frame: 64,
            dim: 8,
            heads: 2,
            r: 2,
            density: 0.25,
            repetitions: 3,
            warmup: 3,
            query_tokens: Some(16),
            seed: 3,
            multi_workers: Some(2),
        };
        let rep = bench_attention(&cfg).unwrap();
        // full {1,2,4}, masked {3}
        assert_eq!(rep.kv_tokens_sparse, 3 * 64 + 16);
        assert_eq!(rep.kv_tokens_full, 256);
        assert_eq!(rep.flops_full * rep.kv_tokens_sparse as u64, rep.flops_sparse * rep.kv_tokens_full as u64);
        assert_eq!(rep.kv_bytes_sparse, kv_bytes(rep.kv_tokens_sparse, 8));
        assert_eq!(rep.single_worker.full.samples_ms.len(), 3);
        assert_eq!(rep.multi_worker.as_ref().unwrap().workers, 2);
        assert_eq!(rep.csv_rows().len(), 2);
        assert_eq!(rep.csv_rows()[0].split(',').count(), CSV_HEADER.split(',').count());
    }
}
