//! Deterministic stand-in for a diffusion U-Net: per block, seeded Q/K/V
//! projections around a pluggable self-attention, followed by a seeded
//! linear mixing stage with a bounded residual update.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::TokenMatrix;
use crate::error::{Error, Result};
use crate::masks::grid_dims;
use crate::media::{cell_span, Frame};
use crate::pipeline::config::BlockSpec;

const RESIDUAL_GAIN: f32 = 0.1;
const LINK_GAIN: f32 = 0.1;
const TIME_GAIN: f32 = 0.05;

/// Per-frame token state, one matrix per attention block.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentGrid {
    pub frame_index: u32,
    /// Last timestep applied, if any.
    pub timestep: Option<u32>,
    pub states: Vec<TokenMatrix>,
}

impl LatentGrid {
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.states.iter().flat_map(|s| s.to_le_bytes()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.states.iter().all(|s| s.data().iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone)]
pub struct BlockWeights {
    pub spec: BlockSpec,
    pub rows: usize,
    pub cols: usize,
    pub w_q: Vec<f32>,
    pub w_k: Vec<f32>,
    pub w_v: Vec<f32>,
    pub w_out: Vec<f32>,
    /// Previous block's pooled state into this block's width.
    pub w_link: Option<Vec<f32>>,
    embed: Vec<f32>,
    positional: Vec<f32>,
}

impl BlockWeights {
    pub fn tokens(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticDenoiser {
    blocks: Vec<BlockWeights>,
    heads: usize,
    frame_width: usize,
    frame_height: usize,
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f32> {
    // unit variance per output coordinate for unit-variance inputs
    let bound = (3.0 / rows as f32).sqrt();
    (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect()
}

fn stream(seed: u64, block: usize, role: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((block as u64) << 8) | role);
    rng
}

impl SyntheticDenoiser {
    pub fn new(seed: u64, blocks: &[BlockSpec], heads: usize, frame_width: usize, frame_height: usize) -> Result<Self> {
        if heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        let mut weights = Vec::with_capacity(blocks.len());
        for (j, &spec) in blocks.iter().enumerate() {
            let c = spec.channels;
            if c % heads != 0 {
                return Err(Error::Config(format!("block {j}: {c} channels not divisible into {heads} heads")));
            }
            let (rows, cols) = grid_dims(spec.resolution, frame_width, frame_height);
            if rows > frame_height || cols > frame_width {
                return Err(Error::Config(format!(
                    "block {j} resolution {} exceeds frame {frame_width}x{frame_height}",
                    spec.resolution
                )));
            }
            let w_link = (j > 0).then(|| uniform_matrix(&mut stream(seed, j, 5), blocks[j - 1].channels, c));
            weights.push(BlockWeights {
                spec,
                rows,
                cols,
                w_q: uniform_matrix(&mut stream(seed, j, 0), c, c),
                w_k: uniform_matrix(&mut stream(seed, j, 1), c, c),
                w_v: uniform_matrix(&mut stream(seed, j, 2), c, c),
                w_out: uniform_matrix(&mut stream(seed, j, 3), c, c),
                w_link,
                embed: uniform_matrix(&mut stream(seed, j, 4), 3, c),
                positional: {
                    let mut rng = stream(seed, j, 6);
                    (0..rows * cols * c).map(|_| rng.random_range(-0.5f32..0.5)).collect()
                },
            });
        }
        Ok(Self { blocks: weights, heads, frame_width, frame_height })
    }

    pub fn blocks(&self) -> &[BlockWeights] {
        &self.blocks
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    /// Initial latent of a frame: cell-averaged color through a seeded
    /// embedding plus seeded positional noise shared by all frames. Stands
    /// in for inversion, so identical frames get identical latents.
    pub fn encode(&self, frame: &Frame, frame_index: u32) -> Result<LatentGrid> {
        if (frame.width(), frame.height()) != (self.frame_width, self.frame_height) {
            return Err(Error::Shape(format!(
                "frame {}x{} vs denoiser {}x{}",
                frame.width(),
                frame.height(),
                self.frame_width,
                self.frame_height
            )));
        }
        let states = self
            .blocks
            .iter()
            .map(|b| {
                let c = b.spec.channels;
                let mut data = b.positional.clone();
                for r in 0..b.rows {
                    let (y0, y1) = cell_span(r, frame.height(), b.rows);
                    for col in 0..b.cols {
                        let (x0, x1) = cell_span(col, frame.width(), b.cols);
                        let mut sum = [0u64; 3];
                        for y in y0..y1 {
                            for x in x0..x1 {
                                let p = frame.get(x, y);
                                for (acc, &v) in sum.iter_mut().zip(&p) {
                                    *acc += v as u64;
                                }
                            }
                        }
                        let n = ((y1 - y0) * (x1 - x0)) as f32;
                        let token = &mut data[(r * b.cols + col) * c..(r * b.cols + col + 1) * c];
                        for (&total, embed) in sum.iter().zip(b.embed.chunks_exact(c)) {
                            let color = total as f32 / n / 255.0 - 0.5;
                            for (t, &e) in token.iter_mut().zip(embed) {
                                *t += color * e;
                            }
                        }
                    }
                }
                TokenMatrix::new(b.tokens(), c, data)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LatentGrid { frame_index, timestep: None, states })
    }

    /// Block `j` input: the block state plus, for `j > 0`, the pooled
    /// (already updated) state of block `j - 1` through a seeded link.
    pub fn block_input(&self, j: usize, latent: &LatentGrid) -> Result<TokenMatrix> {
        let b = &self.blocks[j];
        let mut input = latent.states[j].clone();
        if let Some(link) = &b.w_link {
            let prev = &latent.states[j - 1];
            let mut pooled = vec![0f32; prev.cols()];
            for i in 0..prev.rows() {
                for (p, &v) in pooled.iter_mut().zip(prev.row(i)) {
                    *p += v;
                }
            }
            for p in pooled.iter_mut() {
                *p /= prev.rows() as f32;
            }
            let pooled = TokenMatrix::new(1, prev.cols(), pooled)?.matmul(link, b.spec.channels)?;
            let c = b.spec.channels;
            for token in input.data_mut().chunks_exact_mut(c) {
                for (t, &p) in token.iter_mut().zip(pooled.data()) {
                    *t += LINK_GAIN * p;
                }
            }
        }
        Ok(input)
    }

    pub fn project_q(&self, j: usize, input: &TokenMatrix) -> Result<TokenMatrix> {
        let b = &self.blocks[j];
        input.matmul(&b.w_q, b.spec.channels)
    }

    pub fn project_kv(&self, j: usize, input: &TokenMatrix) -> Result<(TokenMatrix, TokenMatrix)> {
        let b = &self.blocks[j];
        Ok((input.matmul(&b.w_k, b.spec.channels)?, input.matmul(&b.w_v, b.spec.channels)?))
    }

    /// Mixing stage: `state += g · tanh(attn · W_out + time_embedding(t))`.
    pub fn mix(&self, j: usize, timestep: u32, latent: &mut LatentGrid, attn: &TokenMatrix) -> Result<()> {
        let b = &self.blocks[j];
        let c = b.spec.channels;
        let mixed = attn.matmul(&b.w_out, c)?;
        let time: Vec<f32> = (0..c)
            .map(|ch| TIME_GAIN * (timestep as f32 * 0.01 * (ch + 1) as f32).sin())
            .collect();
        let state = latent.states[j].data_mut();
        if state.len() != mixed.data().len() {
            return Err(Error::Shape(format!("block {j} state/attention size mismatch")));
        }
        for (i, (s, &m)) in state.iter_mut().zip(mixed.data()).enumerate() {
            *s += RESIDUAL_GAIN * (m + time[i % c]).tanh();
        }
        Ok(())
    }
}
