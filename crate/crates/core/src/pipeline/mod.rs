//! Two-pass editing: preprocessing (flows and motion masks over reference
//! frames), joint editing of reference frames with sparse extended
//! attention while caching the shared KVs, then editing of intermediate
//! frames against the cache.

mod config;
mod denoiser;
mod passes;
mod schedule;

pub use config::{default_timesteps, BlockSpec, EditConfig, InputSource, KvMode, ScheduleConfig};
pub use denoiser::{BlockWeights, LatentGrid, SyntheticDenoiser};
pub use passes::{intermediate_pass, joint_edit_pass, JointOutcome, PassOptions, RetainedProjections};
pub use schedule::{full_frame_indices, hierarchical_levels, hierarchical_order, select_reference_frames};

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::attention_flops;
use crate::cache::KVCache;
use crate::error::{Error, Result};
use crate::masks::{build_mask_pyramid, MaskPyramid};
use crate::media::{read_frame_sequence, Frame};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockReport {
    pub block: usize,
    pub resolution: usize,
    pub channels: usize,
    pub tokens_per_frame: usize,
    /// `L` of the cached KV.
    pub kv_tokens: usize,
    /// `Z·T`, the fully extended KV length.
    pub kv_tokens_full: usize,
    /// Mean moving fraction over reference positions `2..=Z`.
    pub mean_mask_density: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PhaseTimings {
    pub preprocess_ms: f64,
    pub joint_ms: f64,
    pub intermediate_ms: f64,
    pub total_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub total_frames: usize,
    pub reference_frames: Vec<usize>,
    pub z: usize,
    pub full_frame_positions: Vec<usize>,
    pub intermediate_order: Vec<usize>,
    pub timesteps: usize,
    pub kv_mode: KvMode,
    pub heads: usize,
    pub blocks: Vec<BlockReport>,
    pub cache_entries: usize,
    pub cache_payload_bytes: usize,
    pub cache_serialized_bytes: usize,
    /// Σ over frames × timesteps × blocks of the attention cost model.
    pub modeled_attention_flops: u64,
    pub modeled_full_extension_flops: u64,
    pub workers: usize,
    pub output_crc32: u32,
    pub timings: PhaseTimings,
}

impl RunReport {
    /// Copy with timing fields zeroed, for determinism comparisons.
    pub fn without_timings(&self) -> Self {
        Self { timings: PhaseTimings::default(), ..self.clone() }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    /// Edited latents for frames `1..=N`, in frame order.
    pub latents: Vec<LatentGrid>,
    pub cache: KVCache,
    pub masks: MaskPyramid,
    pub joint: JointOutcome,
    pub report: RunReport,
}

impl PipelineOutput {
    /// All edited latents, concatenated little-endian `f32`.
    pub fn output_bytes(&self) -> Vec<u8> {
        self.latents.iter().flat_map(|l| l.to_le_bytes()).collect()
    }
}

/// Frames named by the config's input source.
pub fn load_input_frames(cfg: &EditConfig) -> Result<Vec<Frame>> {
    match &cfg.input {
        InputSource::Frames { dir } => read_frame_sequence(dir),
        InputSource::Synthetic { scene } => {
            let mut scene = scene.clone();
            scene.frames = cfg.schedule.total_frames;
            scene.render()
        }
    }
}

/// Extra knobs that do not belong in the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub retain_projections: bool,
    /// Process intermediate frames in reverse hierarchical order.
    pub reverse_intermediate_order: bool,
}

/// End to end: preprocessing, joint pass, intermediate pass.
pub fn run_pipeline(cfg: &EditConfig, frames: &[Frame]) -> Result<PipelineOutput> {
    run_pipeline_with(cfg, frames, RunOptions::default())
}

pub fn run_pipeline_with(cfg: &EditConfig, frames: &[Frame], options: RunOptions) -> Result<PipelineOutput> {
    cfg.validate()?;
    let schedule = &cfg.schedule;
    let n = schedule.total_frames;
    if frames.len() != n {
        return Err(Error::Config(format!("config expects {n} frames, input has {}", frames.len())));
    }
    let (w, h) = (frames[0].width(), frames[0].height());
    cfg.validate_frame_size(w, h)?;
    let workers = cfg.worker_count();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    pool.install(|| run_inner(cfg, frames, options, workers))
}

fn run_inner(cfg: &EditConfig, frames: &[Frame], options: RunOptions, workers: usize) -> Result<PipelineOutput> {
    let schedule = &cfg.schedule;
    let n = schedule.total_frames;
    let (w, h) = (frames[0].width(), frames[0].height());
    let started = Instant::now();

    let refs = select_reference_frames(n, schedule.reference_interval);
    let z = refs.len();
    let resolutions = schedule.resolutions();
    let reference_frames: Vec<Frame> = refs.iter().map(|&i| frames[i - 1].clone()).collect();
    let masks = if z >= 2 {
        build_mask_pyramid(&reference_frames, &resolutions, &cfg.flow, &cfg.masks)?
    } else {
        MaskPyramid::new()
    };
    let denoiser = SyntheticDenoiser::new(schedule.seed, &schedule.blocks, cfg.heads, w, h)?;
    let preprocess_ms = started.elapsed().as_secs_f64() * 1e3;

    let t_joint = Instant::now();
    let mut ref_latents = refs
        .iter()
        .map(|&i| denoiser.encode(&frames[i - 1], i as u32))
        .collect::<Result<Vec<_>>>()?;
    let mut cache = KVCache::new();
    let pass_options = PassOptions { kv_mode: cfg.kv_mode, retain_projections: options.retain_projections };
    let joint = joint_edit_pass(&mut ref_latents, &masks, schedule, &denoiser, &mut cache, &pass_options)?;
    let joint_ms = t_joint.elapsed().as_secs_f64() * 1e3;

    let t_int = Instant::now();
    let order = hierarchical_order(n, &refs);
    let mut processing: Vec<usize> = order.clone();
    if options.reverse_intermediate_order {
        processing.reverse();
    }
    let mut int_latents = processing
        .iter()
        .map(|&i| denoiser.encode(&frames[i - 1], i as u32))
        .collect::<Result<Vec<_>>>()?;
    intermediate_pass(&mut int_latents, schedule, &denoiser, &cache)?;
    let intermediate_ms = t_int.elapsed().as_secs_f64() * 1e3;

    for (_, kv) in cache.iter() {
        if let Some(bad) = kv.source_frames().into_iter().find(|f| !refs.contains(&(*f as usize))) {
            return Err(Error::Invariant(format!("frame {bad} leaked into the cached KV")));
        }
    }

    let mut latents: Vec<LatentGrid> = ref_latents.into_iter().chain(int_latents).collect();
    latents.sort_by_key(|l| l.frame_index);

    let full_positions: Vec<usize> = full_frame_indices(z, schedule.full_frame_interval).into_iter().collect();
    let blocks: Vec<BlockReport> = denoiser
        .blocks()
        .iter()
        .enumerate()
        .map(|(j, b)| {
            let densities: Vec<f64> = (2..=z as u32)
                .filter_map(|i| masks.get(i, b.spec.resolution).map(|m| m.density()))
                .collect();
            BlockReport {
                block: j,
                resolution: b.spec.resolution,
                channels: b.spec.channels,
                tokens_per_frame: b.tokens(),
                kv_tokens: joint.kv_tokens[j],
                kv_tokens_full: z * b.tokens(),
                mean_mask_density: if densities.is_empty() {
                    0.0
                } else {
                    densities.iter().sum::<f64>() / densities.len() as f64
                },
            }
        })
        .collect();
    let steps = schedule.timesteps.len() as u64;
    let flops = |full: bool| -> u64 {
        blocks
            .iter()
            .map(|b| {
                let l = if full { b.kv_tokens_full } else { b.kv_tokens };
                n as u64 * steps * attention_flops(b.tokens_per_frame, l, b.channels)
            })
            .sum()
    };
    let stats = cache.stats();
    let output_crc32 = {
        let mut hasher = crc32fast::Hasher::new();
        for l in &latents {
            hasher.update(&l.to_le_bytes());
        }
        hasher.finalize()
    };
    let report = RunReport {
        total_frames: n,
        reference_frames: refs,
        z,
        full_frame_positions: full_positions,
        intermediate_order: order,
        timesteps: schedule.timesteps.len(),
        kv_mode: cfg.kv_mode,
        heads: cfg.heads,
        modeled_attention_flops: flops(false),
        modeled_full_extension_flops: flops(true),
        blocks,
        cache_entries: stats.entries,
        cache_payload_bytes: stats.payload_bytes,
        cache_serialized_bytes: stats.serialized_bytes,
        workers,
        output_crc32,
        timings: PhaseTimings {
            preprocess_ms,
            joint_ms,
            intermediate_ms,
            total_ms: started.elapsed().as_secs_f64() * 1e3,
        },
    };
    log::info!(
        "edited {n} frames (Z={z}) in {:.1} ms; cache {} entries, {} bytes",
        report.timings.total_ms,
        report.cache_entries,
        report.cache_serialized_bytes
    );
    Ok(PipelineOutput { latents, cache, masks, joint, report })
}
