//! Coarse motion estimation (exhaustive SAD block matching), Middlebury
//! `.flo` I/O, and bilinear backward warping.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::media::{list_indexed_files, Frame};

pub const FLO_MAGIC: f32 = 202021.25;

/// Per-pixel displacement `(u, v)` in pixels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    width: usize,
    height: usize,
    vectors: Vec<[f32; 2]>,
}

impl FlowField {
    pub fn new(width: usize, height: usize, vectors: Vec<[f32; 2]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("flow must be non-empty, got {width}x{height}")));
        }
        if vectors.len() != width * height {
            return Err(Error::Shape(format!(
                "flow {width}x{height} needs {} vectors, got {}",
                width * height,
                vectors.len()
            )));
        }
        if vectors.iter().any(|[u, v]| !u.is_finite() || !v.is_finite()) {
            return Err(Error::InvalidInput("flow contains non-finite components".into()));
        }
        Ok(Self { width, height, vectors })
    }

    pub fn zeros(width: usize, height: usize) -> Result<Self> {
        Self::uniform(width, height, [0.0, 0.0])
    }

    pub fn uniform(width: usize, height: usize, uv: [f32; 2]) -> Result<Self> {
        Self::new(width, height, vec![uv; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn vectors(&self) -> &[[f32; 2]] {
        &self.vectors
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 2] {
        self.vectors[y * self.width + x]
    }

    pub fn max_magnitude(&self) -> f32 {
        self.vectors
            .iter()
            .map(|[u, v]| (u * u + v * v).sqrt())
            .fold(0.0, f32::max)
    }
}

fn check_same_dims(a: &Frame, b: &Frame) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Shape(format!(
            "frames differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    Ok(())
}

/// Candidate displacements in tie-break order: smallest `|u|+|v|`, then
/// smallest `v`, then smallest `u`.
fn search_order(radius: i64) -> Vec<(i64, i64)> {
    let mut cands: Vec<(i64, i64)> = (-radius..=radius)
        .flat_map(|v| (-radius..=radius).map(move |u| (u, v)))
        .collect();
    cands.sort_by_key(|&(u, v)| (u.abs() + v.abs(), v, u));
    cands
}

/// Exhaustive block matching. Each `block`×`block` tile of `prev` gets the
/// displacement within `±radius` minimizing the RGB sum of absolute
/// differences against `next` (displaced samples clamp to the border).
pub fn estimate_flow_block_matching(
    prev: &Frame,
    next: &Frame,
    block: usize,
    radius: usize,
) -> Result<FlowField> {
    check_same_dims(prev, next)?;
    if block == 0 {
        return Err(Error::InvalidInput("block size must be at least 1".into()));
    }
    let (w, h) = (prev.width(), prev.height());
    let tiles_x = w.div_ceil(block);
    let tiles_y = h.div_ceil(block);
    let order = search_order(radius as i64);

    let tile_flows: Vec<(i64, i64)> = (0..tiles_x * tiles_y)
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let (x0, y0) = (tx * block, ty * block);
            let (x1, y1) = ((x0 + block).min(w), (y0 + block).min(h));
            let mut best = (0i64, 0i64);
            let mut best_sad = u64::MAX;
            for &(u, v) in &order {
                let mut sad = 0u64;
                for y in y0..y1 {
                    let ny = (y as i64 + v).clamp(0, h as i64 - 1) as usize;
                    for x in x0..x1 {
                        let nx = (x as i64 + u).clamp(0, w as i64 - 1) as usize;
                        let a = prev.get(x, y);
                        let b = next.get(nx, ny);
                        sad += a[0].abs_diff(b[0]) as u64
                            + a[1].abs_diff(b[1]) as u64
                            + a[2].abs_diff(b[2]) as u64;
                    }
                    if sad >= best_sad {
                        break;
                    }
                }
                if sad < best_sad {
                    best_sad = sad;
                    best = (u, v);
                    if sad == 0 {
                        break;
                    }
                }
            }
            best
        })
        .collect();

    let mut vectors = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = tile_flows[(y / block) * tiles_x + x / block];
            vectors.push([u as f32, v as f32]);
        }
    }
    FlowField::new(w, h, vectors)
}

/// Bilinear backward warp: `out(x, y) = image(x + u, y + v)`, with sample
/// positions clamped to the image.
pub fn warp_bilinear(image: &Frame, flow: &FlowField) -> Result<Frame> {
    if (image.width(), image.height()) != (flow.width(), flow.height()) {
        return Err(Error::Shape(format!(
            "image {}x{} vs flow {}x{}",
            image.width(),
            image.height(),
            flow.width(),
            flow.height()
        )));
    }
    let (w, h) = (image.width(), image.height());
    let mut pixels = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let [u, v] = flow.get(x, y);
            let sx = (x as f32 + u).clamp(0.0, (w - 1) as f32);
            let sy = (y as f32 + v).clamp(0.0, (h - 1) as f32);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f32, sy - y0 as f32);
            let (p00, p10, p01, p11) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
            let mut out = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f32 * (1.0 - fx) + p10[c] as f32 * fx;
                let bottom = p01[c] as f32 * (1.0 - fx) + p11[c] as f32 * fx;
                let value = top * (1.0 - fy) + bottom * fy;
                out[c] = (value + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            pixels.push(out);
        }
    }
    Frame::new(w, h, pixels)
}

// ---------------------------------------------------------------------------
// Middlebury .flo
// ---------------------------------------------------------------------------

pub fn encode_flo(field: &FlowField) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + field.vectors.len() * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(field.width as i32).to_le_bytes());
    out.extend_from_slice(&(field.height as i32).to_le_bytes());
    for [u, v] in &field.vectors {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::format("flo", "header truncated"));
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(Error::format("flo", format!("bad magic {magic}")));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(Error::format("flo", format!("bad dimensions {width}x{height}")));
    }
    let (width, height) = (width as usize, height as usize);
    let need = width * height * 8;
    if bytes.len() - 12 < need {
        return Err(Error::format(
            "flo",
            format!("payload truncated: need {need} bytes, have {}", bytes.len() - 12),
        ));
    }
    let vectors: Vec<[f32; 2]> = bytes[12..12 + need]
        .chunks_exact(8)
        .map(|c| {
            [
                f32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                f32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            ]
        })
        .collect();
    if vectors.iter().any(|[u, v]| !u.is_finite() || !v.is_finite()) {
        return Err(Error::format("flo", "non-finite flow component"));
    }
    FlowField::new(width, height, vectors)
}

pub fn write_flo(field: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, encode_flo(field)).map_err(|e| Error::io(path, e))
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes)
}

/// Reads every `.flo` in `dir` in filename-index order.
pub fn read_flo_dir(dir: &Path) -> Result<Vec<FlowField>> {
    list_indexed_files(dir, "flo")?.iter().map(|p| read_flo(p)).collect()
}

pub fn write_flo_sequence(flows: &[FlowField], dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    flows
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("flow_{i:04}.flo"));
            write_flo(f, &path).map(|_| path)
        })
        .collect()
}

/// Block-matching flows between each pair of successive frames.
pub fn successive_flows(frames: &[Frame], block: usize, radius: usize) -> Result<Vec<FlowField>> {
    frames
        .windows(2)
        .map(|pair| estimate_flow_block_matching(&pair[0], &pair[1], block, radius))
        .collect()
}
