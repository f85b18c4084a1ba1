#![allow(dead_code)]

use adave_core::attention::TokenMatrix;
use adave_core::masks::{FlowSource, MaskMode, MaskOptions, MotionMask};
use adave_core::media::{cell_span, Frame, GrayImage};
use adave_core::pipeline::{BlockSpec, EditConfig, InputSource, KvMode, ScheduleConfig};
use adave_core::scene::{PixelRect, SceneSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> TokenMatrix {
    TokenMatrix::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
}

pub fn noise_frame(w: usize, h: usize, seed: u64) -> Frame {
    let mut r = rng(seed);
    Frame::new(w, h, (0..w * h).map(|_| [r.random(), r.random(), r.random()]).collect()).unwrap()
}

pub fn noise_gray(w: usize, h: usize, r: &mut ChaCha8Rng) -> GrayImage {
    GrayImage::new(w, h, (0..w * h).map(|_| r.random()).collect()).unwrap()
}

/// Straight-line attention over explicit `len × d` keys/values: dot products
/// over features ascending, scale, max-subtracted softmax with the
/// normalizer summed over keys ascending, weighted sum over keys ascending.
pub fn naive_attention(q: &TokenMatrix, keys: &[f32], values: &[f32], len: usize, heads: usize) -> Vec<f32> {
    let d = q.cols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut out = vec![0f32; q.rows() * d];
    for i in 0..q.rows() {
        let qrow = q.row(i);
        for h in 0..heads {
            let off = h * dh;
            let mut w: Vec<f32> = (0..len)
                .map(|k| {
                    let mut s = 0f32;
                    for c in 0..dh {
                        s += qrow[off + c] * keys[k * d + off + c];
                    }
                    s * scale
                })
                .collect();
            let max = w.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0f32;
            for v in w.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in w.iter_mut() {
                *v /= sum;
            }
            for c in 0..dh {
                let mut acc = 0f32;
                for k in 0..len {
                    acc += w[k] * values[k * d + off + c];
                }
                out[i * d + off + c] = acc;
            }
        }
    }
    out
}

/// Double-precision attention of `q` over the row concatenation of
/// `(keys, values)` pairs.
pub fn dense_f64_attention(q: &TokenMatrix, kvs: &[(&TokenMatrix, &TokenMatrix)], heads: usize) -> Vec<f64> {
    let d = q.cols();
    let dh = d / heads;
    let rows: Vec<(&[f32], &[f32])> = kvs
        .iter()
        .flat_map(|(k, v)| (0..k.rows()).map(move |j| (k.row(j), v.row(j))))
        .collect();
    let mut out = vec![0f64; q.rows() * d];
    for i in 0..q.rows() {
        for h in 0..heads {
            let off = h * dh;
            let scores: Vec<f64> = rows
                .iter()
                .map(|(k, _)| {
                    (0..dh).map(|c| q.row(i)[off + c] as f64 * k[off + c] as f64).sum::<f64>() / (dh as f64).sqrt()
                })
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                out[i * d + off + c] = rows.iter().zip(&e).map(|((_, v), w)| w / z * v[off + c] as f64).sum();
            }
        }
    }
    out
}

pub fn max_abs_diff_f64(a: &[f32], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (*x as f64 - y).abs()).fold(0.0, f64::max)
}

pub fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

pub fn edit_config(scene: SceneSpec, n: usize, s: usize, r: usize) -> EditConfig {
    EditConfig {
        schedule: ScheduleConfig {
            total_frames: n,
            reference_interval: s,
            full_frame_interval: r,
            timesteps: vec![41, 21, 1],
            seed: 7,
            blocks: vec![BlockSpec { resolution: 8, channels: 8 }, BlockSpec { resolution: 4, channels: 8 }],
        },
        heads: 2,
        flow: FlowSource::BlockMatching { block: 8, radius: 8 },
        masks: MaskOptions::default(),
        kv_mode: KvMode::Sparse,
        input: InputSource::Synthetic { scene },
        workers: Some(2),
    }
}

pub fn fixed_density(density: f64) -> MaskOptions {
    MaskOptions { mode: MaskMode::FixedDensity { density, seed: 11 }, ..MaskOptions::default() }
}

/// Brute-force Otsu: smallest `t` maximizing between-class variance,
/// compared exactly in rational form.
pub fn exhaustive_otsu(values: &[u8]) -> Option<u8> {
    let n = values.len() as i128;
    let total: i128 = values.iter().map(|&v| v as i128).sum();
    let mut best: Option<(u8, i128, i128)> = None;
    for t in 0..=255u8 {
        let n0 = values.iter().filter(|&&v| v <= t).count() as i128;
        let n1 = n - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s0: i128 = values.iter().filter(|&&v| v <= t).map(|&v| v as i128).sum();
        // n² σ_b² = (n·s0 − n0·total)² / (n0·n1)
        let diff = n * s0 - n0 * total;
        let num = diff * diff;
        let den = n0 * n1;
        match best {
            Some((_, bn, bd)) if num * bd <= bn * den => {}
            _ => best = Some((t, num, den)),
        }
    }
    best.map(|b| b.0)
}

/// Cells more than half covered by the moving regions.
pub fn ground_truth(regions: &[PixelRect], rows: usize, cols: usize, w: usize, h: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = cell_span(r, h, rows);
        for c in 0..cols {
            let (x0, x1) = cell_span(c, w, cols);
            let inside = (y0..y1)
                .flat_map(|y| (x0..x1).map(move |x| (x, y)))
                .filter(|&(x, y)| PixelRect::union_contains(regions, x, y))
                .count();
            out.push(2 * inside > (y1 - y0) * (x1 - x0));
        }
    }
    out
}

pub fn iou(pred: &MotionMask, truth: &[bool]) -> f64 {
    let inter = pred.bits().iter().zip(truth).filter(|(a, b)| **a && **b).count();
    let union = pred.bits().iter().zip(truth).filter(|(a, b)| **a || **b).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

