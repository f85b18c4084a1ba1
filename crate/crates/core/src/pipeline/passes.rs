use rayon::prelude::*;

use crate::attention::{build_sparse_kv, extend_kv_full, full_frame_indices, ifsa, sesa, FrameKv, TokenMatrix};
use crate::cache::{CacheKey, KVCache};
use crate::error::{CacheError, Error, Result};
use crate::masks::MaskPyramid;
use crate::pipeline::config::{KvMode, ScheduleConfig};
use crate::pipeline::denoiser::{LatentGrid, SyntheticDenoiser};

#[derive(Debug, Clone, Copy, Default)]
pub struct PassOptions {
    pub kv_mode: KvMode,
    /// Keep every reference frame's K/V projections per cache key.
    pub retain_projections: bool,
}

/// Reference projections that produced one cache entry.
#[derive(Debug, Clone)]
pub struct RetainedProjections {
    pub key: CacheKey,
    /// `(frame_index, keys, values)` in reference order.
    pub frames: Vec<(u32, TokenMatrix, TokenMatrix)>,
}

#[derive(Debug, Clone, Default)]
pub struct JointOutcome {
    /// `L` per block (constant across timesteps since masks are fixed).
    pub kv_tokens: Vec<usize>,
    pub retained: Vec<RetainedProjections>,
}

/// First pass: edits the reference frames jointly. At every timestep and
/// block, all reference frames are projected, their keys/values are
/// gathered into one shared KV that is cached under `(t, j)`, and every
/// reference frame's queries attend to it. The cache is sealed on return.
pub fn joint_edit_pass(
    refs: &mut [LatentGrid],
    masks: &MaskPyramid,
    schedule: &ScheduleConfig,
    denoiser: &SyntheticDenoiser,
    cache: &mut KVCache,
    options: &PassOptions,
) -> Result<JointOutcome> {
    if cache.is_sealed() || !cache.is_empty() {
        return Err(Error::Invariant("joint pass needs an empty, unsealed cache".into()));
    }
    if refs.is_empty() {
        return Err(Error::InvalidInput("joint pass needs at least one reference frame".into()));
    }
    if refs.windows(2).any(|w| w[0].frame_index >= w[1].frame_index) {
        return Err(Error::InvalidInput("reference latents must be in ascending frame order".into()));
    }
    let z = refs.len();
    let r = schedule.full_frame_interval;
    if options.kv_mode == KvMode::Sparse {
        let full = full_frame_indices(z, r);
        for i in (2..=z).filter(|i| !full.contains(i)) {
            for b in denoiser.blocks() {
                if masks.get(i as u32, b.spec.resolution).is_none() {
                    return Err(Error::InvalidInput(format!(
                        "mask missing for reference position {i} at resolution {}",
                        b.spec.resolution
                    )));
                }
            }
        }
    }

    let heads = denoiser.heads();
    let mut outcome = JointOutcome { kv_tokens: vec![0; denoiser.blocks().len()], retained: Vec::new() };
    for &t in &schedule.timesteps {
        for (j, block) in denoiser.blocks().iter().enumerate() {
            let projections: Vec<(TokenMatrix, TokenMatrix, TokenMatrix)> = refs
                .par_iter()
                .map(|latent| {
                    let input = denoiser.block_input(j, latent)?;
                    let q = denoiser.project_q(j, &input)?;
                    let (k, v) = denoiser.project_kv(j, &input)?;
                    Ok((q, k, v))
                })
                .collect::<Result<_>>()?;
            let frames: Vec<FrameKv> = refs
                .iter()
                .zip(&projections)
                .map(|(l, (_, k, v))| FrameKv { frame_index: l.frame_index, keys: k, values: v })
                .collect();
            let sparse = match options.kv_mode {
                KvMode::Sparse => build_sparse_kv(&frames, masks, block.spec.resolution, r)?,
                KvMode::Full => extend_kv_full(&frames)?,
            };
            outcome.kv_tokens[j] = sparse.len();

            refs.par_iter_mut()
                .zip(&projections)
                .try_for_each(|(latent, (q, _, _))| {
                    let attended = sesa(q, &sparse, heads)?;
                    denoiser.mix(j, t, latent, &attended)
                })?;

            let key = CacheKey::new(t, j as u32);
            if options.retain_projections {
                outcome.retained.push(RetainedProjections {
                    key,
                    frames: refs
                        .iter()
                        .zip(projections)
                        .map(|(l, (_, k, v))| (l.frame_index, k, v))
                        .collect(),
                });
            }
            cache.put(key, sparse)?;
        }
        refs.iter_mut().for_each(|l| l.timestep = Some(t));
    }
    cache.seal();
    Ok(outcome)
}

/// Second pass: every intermediate frame's queries attend to the sealed
/// cache entry for `(t, j)`. Frames never write to the cache, so they are
/// processed independently and in parallel.
pub fn intermediate_pass(
    ints: &mut [LatentGrid],
    schedule: &ScheduleConfig,
    denoiser: &SyntheticDenoiser,
    cache: &KVCache,
) -> Result<()> {
    if !cache.is_sealed() {
        return Err(CacheError::NotSealed.into());
    }
    let heads = denoiser.heads();
    ints.par_iter_mut().try_for_each(|latent| {
        for &t in &schedule.timesteps {
            for j in 0..denoiser.blocks().len() {
                let input = denoiser.block_input(j, latent)?;
                let q = denoiser.project_q(j, &input)?;
                let cached = cache.get(CacheKey::new(t, j as u32))?;
                let attended = ifsa(&q, cached, heads)?;
                denoiser.mix(j, t, latent, &attended)?;
            }
            latent.timestep = Some(t);
        }
        Ok(())
    })
}
