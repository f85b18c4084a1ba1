//! Per-resolution binary motion masks derived from successive flow fields.
//!
//! The default chain renders each flow with the Middlebury color coding
//! (zero motion is white), converts it to luma, box-downsamples it to the
//! attention grid and splits it with Otsu's threshold. Cells in the dark
//! class are moving. Masks are built once per run and reused at every
//! diffusion timestep.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{read_flo_dir, successive_flows, FlowField};
use crate::media::{
    cell_span, downsample_avg, list_indexed_files, read_pgm, rgb_to_gray, write_pgm, Frame,
    GrayImage, Otsu,
};

const WHEEL_SEGMENTS: [(usize, [u8; 3], [u8; 3]); 6] = [
    // (length, start color, end color); each segment interpolates one channel
    (15, [255, 0, 0], [255, 255, 0]),   // red -> yellow
    (6, [255, 255, 0], [0, 255, 0]),    // yellow -> green
    (4, [0, 255, 0], [0, 255, 255]),    // green -> cyan
    (11, [0, 255, 255], [0, 0, 255]),   // cyan -> blue
    (13, [0, 0, 255], [255, 0, 255]),   // blue -> magenta
    (6, [255, 0, 255], [255, 0, 0]),    // magenta -> red
];

/// The 55-entry Middlebury color wheel.
pub fn color_wheel() -> Vec<[f32; 3]> {
    let mut wheel = Vec::with_capacity(55);
    for &(len, from, to) in &WHEEL_SEGMENTS {
        for i in 0..len {
            let mut c = [0f32; 3];
            for ch in 0..3 {
                let ramp = (255 * i / len) as f32;
                c[ch] = match from[ch].cmp(&to[ch]) {
                    std::cmp::Ordering::Less => ramp,
                    std::cmp::Ordering::Greater => 255.0 - ramp,
                    std::cmp::Ordering::Equal => from[ch] as f32,
                };
            }
            wheel.push(c);
        }
    }
    wheel
}

const MAGNITUDE_EPS: f32 = 1e-6;

/// Middlebury color coding of a flow field. Magnitudes are normalized by
/// the field's maximum (or 1 when the field is essentially still).
pub fn flow_to_rgb(flow: &FlowField) -> Frame {
    let wheel = color_wheel();
    let ncols = wheel.len();
    let max = flow.max_magnitude();
    let norm = if max < MAGNITUDE_EPS { 1.0 } else { max };
    let pixels = flow
        .vectors()
        .iter()
        .map(|&[u, v]| {
            let (u, v) = (u / norm, v / norm);
            let rad = (u * u + v * v).sqrt();
            let angle = (-v).atan2(-u) / std::f32::consts::PI;
            let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f32;
            let k0 = (fk.floor() as usize).min(ncols - 1);
            let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
            let f = fk - k0 as f32;
            let mut rgb = [0u8; 3];
            for ch in 0..3 {
                let c0 = wheel[k0][ch] / 255.0;
                let c1 = wheel[k1][ch] / 255.0;
                let mut col = (1.0 - f) * c0 + f * c1;
                if rad <= 1.0 {
                    col = 1.0 - rad * (1.0 - col);
                } else {
                    col *= 0.75;
                }
                rgb[ch] = (255.0 * col + 0.5).floor().clamp(0.0, 255.0) as u8;
            }
            rgb
        })
        .collect();
    Frame::new(flow.width(), flow.height(), pixels).expect("flow dims are valid frame dims")
}

/// Grayscale flow visualization used for thresholding.
pub fn flow_to_gray(flow: &FlowField) -> GrayImage {
    rgb_to_gray(&flow_to_rgb(flow))
}

/// Binary moving-region grid at one attention resolution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MotionMask {
    frame_index: u32,
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl MotionMask {
    pub fn new(frame_index: u32, rows: usize, cols: usize, bits: Vec<bool>) -> Result<Self> {
        if frame_index < 2 {
            return Err(Error::InvalidInput(format!(
                "mask frame index must be >= 2 (frame 1 has no predecessor), got {frame_index}"
            )));
        }
        if rows == 0 || cols == 0 || bits.len() != rows * cols {
            return Err(Error::Shape(format!(
                "mask {rows}x{cols} needs {} bits, got {}",
                rows * cols,
                bits.len()
            )));
        }
        Ok(Self { frame_index, rows, cols, bits })
    }

    pub fn filled(frame_index: u32, rows: usize, cols: usize, moving: bool) -> Result<Self> {
        Self::new(frame_index, rows, cols, vec![moving; rows * cols])
    }

    /// Reference-frame position `i` (1-based, `i >= 2`).
    pub fn frame_index(&self) -> u32 {
        self.frame_index
    }

    /// Grid height, i.e. the block resolution `d`.
    pub fn block_res(&self) -> usize {
        self.rows
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.popcount() as f64 / self.bits.len() as f64
    }

    /// Token positions (row-major) of the moving cells, ascending.
    pub fn moving_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, &b)| b).map(|(i, _)| i)
    }

    pub fn to_gray(&self) -> GrayImage {
        let values = self.bits.iter().map(|&b| if b { 255 } else { 0 }).collect();
        GrayImage::new(self.cols, self.rows, values).expect("mask dims are valid")
    }

    pub fn from_gray(frame_index: u32, image: &GrayImage) -> Result<Self> {
        let mut bits = Vec::with_capacity(image.values().len());
        for &v in image.values() {
            match v {
                0 => bits.push(false),
                255 => bits.push(true),
                other => {
                    return Err(Error::format("mask PGM", format!("value {other} is neither 0 nor 255")))
                }
            }
        }
        Self::new(frame_index, image.height(), image.width(), bits)
    }
}

/// Token grid `(rows, cols)` for block resolution `res` on a `w`×`h` frame.
/// `res` names the height; width keeps the aspect ratio.
pub fn grid_dims(res: usize, width: usize, height: usize) -> (usize, usize) {
    (res, (res * width).div_ceil(height))
}

/// What to do when the thresholded image is a single non-white value
/// (e.g. a whole-frame pan).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UniformMotionPolicy {
    #[default]
    Static,
    Moving,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MaskMode {
    /// Color-code, luma, downsample, Otsu.
    #[default]
    Otsu,
    /// Cell-mean flow magnitude strictly above `threshold` pixels.
    Magnitude { threshold: f32 },
    /// Seeded masks with exactly `round(density * cells)` moving cells,
    /// ignoring the flow. For cost experiments.
    FixedDensity { density: f64, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MaskOptions {
    #[serde(default)]
    pub mode: MaskMode,
    #[serde(default)]
    pub uniform_motion: UniformMotionPolicy,
}

/// Threshold a grayscale flow visualization at one resolution.
pub fn build_mask(
    gray_flow: &GrayImage,
    block_res: usize,
    frame_index: u32,
    policy: UniformMotionPolicy,
) -> Result<MotionMask> {
    let (rows, cols) = grid_dims(block_res, gray_flow.width(), gray_flow.height());
    if block_res > gray_flow.height() || cols > gray_flow.width() {
        return Err(Error::InvalidInput(format!(
            "block resolution {block_res} exceeds flow image {}x{}",
            gray_flow.width(),
            gray_flow.height()
        )));
    }
    let small = downsample_avg(gray_flow, cols, rows)?;
    let bits = match crate::media::otsu_threshold(&small) {
        Otsu::Threshold(t) => small.values().iter().map(|&v| v <= t).collect(),
        // uniform white means no motion anywhere
        Otsu::Degenerate(255) => vec![false; rows * cols],
        Otsu::Degenerate(_) => vec![policy == UniformMotionPolicy::Moving; rows * cols],
    };
    MotionMask::new(frame_index, rows, cols, bits)
}

fn magnitude_mask(flow: &FlowField, block_res: usize, frame_index: u32, threshold: f32) -> Result<MotionMask> {
    let (w, h) = (flow.width(), flow.height());
    let (rows, cols) = grid_dims(block_res, w, h);
    if rows > h || cols > w {
        return Err(Error::InvalidInput(format!("block resolution {block_res} exceeds flow {w}x{h}")));
    }
    let mut bits = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let (y0, y1) = cell_span(r, h, rows);
        for c in 0..cols {
            let (x0, x1) = cell_span(c, w, cols);
            let mut sum = 0f64;
            for y in y0..y1 {
                for x in x0..x1 {
                    let [u, v] = flow.get(x, y);
                    sum += ((u * u + v * v) as f64).sqrt();
                }
            }
            let mean = sum / ((y1 - y0) * (x1 - x0)) as f64;
            bits.push(mean > threshold as f64);
        }
    }
    MotionMask::new(frame_index, rows, cols, bits)
}

fn fixed_density_mask(
    rows: usize,
    cols: usize,
    frame_index: u32,
    density: f64,
    seed: u64,
) -> Result<MotionMask> {
    if !(0.0..=1.0).contains(&density) {
        return Err(Error::InvalidInput(format!("mask density {density} outside [0, 1]")));
    }
    let cells = rows * cols;
    let ones = (density * cells as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..cells).collect();
    let stream = seed ^ ((frame_index as u64) << 32) ^ (rows as u64 * 0x9E37_79B9);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream));
    let mut bits = vec![false; cells];
    for &i in &order[..ones.min(cells)] {
        bits[i] = true;
    }
    MotionMask::new(frame_index, rows, cols, bits)
}

/// Masks for reference positions `2..=Z` at every attention resolution.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MaskPyramid {
    masks: BTreeMap<(u32, usize), MotionMask>,
}

impl MaskPyramid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, mask: MotionMask) -> Result<()> {
        let key = (mask.frame_index, mask.rows);
        if let Some((_, other)) = self.masks.iter().find(|((_, r), _)| *r == mask.rows) {
            if other.cols != mask.cols {
                return Err(Error::Shape(format!(
                    "masks at resolution {} disagree on width: {} vs {}",
                    mask.rows, other.cols, mask.cols
                )));
            }
        }
        if self.masks.insert(key, mask).is_some() {
            return Err(Error::InvalidInput(format!(
                "mask for frame {} at resolution {} given twice",
                key.0, key.1
            )));
        }
        Ok(())
    }

    pub fn get(&self, frame_index: u32, res: usize) -> Option<&MotionMask> {
        self.masks.get(&(frame_index, res))
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &MotionMask> {
        self.masks.values()
    }

    pub fn resolutions(&self) -> Vec<usize> {
        let mut res: Vec<usize> = self.masks.keys().map(|&(_, r)| r).collect();
        res.sort_unstable();
        res.dedup();
        res
    }

    /// Checks that every `(i, res)` for `i in 2..=z` is present.
    pub fn validate_coverage(&self, z: usize, resolutions: &[usize]) -> Result<()> {
        for i in 2..=z as u32 {
            for &res in resolutions {
                if self.get(i, res).is_none() {
                    return Err(Error::InvalidInput(format!("mask missing for frame {i} at resolution {res}")));
                }
            }
        }
        Ok(())
    }

    /// Masks from precomputed flows; `flows[k]` is the flow from reference
    /// position `k + 1` to `k + 2`.
    pub fn from_flows(flows: &[FlowField], resolutions: &[usize], options: &MaskOptions) -> Result<Self> {
        let mut pyramid = MaskPyramid::new();
        for (k, flow) in flows.iter().enumerate() {
            if let Some(first) = flows.first() {
                if (first.width(), first.height()) != (flow.width(), flow.height()) {
                    return Err(Error::Shape(format!(
                        "flow {k} is {}x{}, expected {}x{}",
                        flow.width(),
                        flow.height(),
                        first.width(),
                        first.height()
                    )));
                }
            }
            let frame_index = k as u32 + 2;
            let gray = matches!(options.mode, MaskMode::Otsu).then(|| flow_to_gray(flow));
            for &res in resolutions {
                let mask = match options.mode {
                    MaskMode::Otsu => build_mask(gray.as_ref().unwrap(), res, frame_index, options.uniform_motion)?,
                    MaskMode::Magnitude { threshold } => magnitude_mask(flow, res, frame_index, threshold)?,
                    MaskMode::FixedDensity { density, seed } => {
                        let (rows, cols) = grid_dims(res, flow.width(), flow.height());
                        fixed_density_mask(rows, cols, frame_index, density, seed)?
                    }
                };
                pyramid.insert(mask)?;
            }
        }
        Ok(pyramid)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for mask in self.masks.values() {
            write_pgm(&mask.to_gray(), &dir.join(mask_file_name(mask.frame_index, mask.rows)))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mut pyramid = MaskPyramid::new();
        for path in list_indexed_files(dir, "pgm")? {
            let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some((frame_index, res)) = parse_mask_file_name(name) else {
                continue;
            };
            let mask = MotionMask::from_gray(frame_index, &read_pgm(&path)?)?;
            if mask.rows != res {
                return Err(Error::format("mask PGM", format!("{} has height {}", path.display(), mask.rows)));
            }
            pyramid.insert(mask)?;
        }
        Ok(pyramid)
    }
}

pub fn mask_file_name(frame_index: u32, res: usize) -> String {
    format!("mask_i{frame_index:04}_d{res:04}.pgm")
}

fn parse_mask_file_name(stem: &str) -> Option<(u32, usize)> {
    let rest = stem.strip_prefix("mask_i")?;
    let (frame, res) = rest.split_once("_d")?;
    Some((frame.parse().ok()?, res.parse().ok()?))
}

/// Where successive-frame flows come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FlowSource {
    BlockMatching {
        #[serde(default = "default_block")]
        block: usize,
        #[serde(default = "default_radius")]
        radius: usize,
    },
    /// Precomputed `.flo` files, one per successive reference pair.
    FloDir { path: std::path::PathBuf },
}

fn default_block() -> usize {
    8
}

fn default_radius() -> usize {
    8
}

impl Default for FlowSource {
    fn default() -> Self {
        FlowSource::BlockMatching { block: default_block(), radius: default_radius() }
    }
}

/// Flows between successive reference frames from the configured source.
pub fn reference_flows(reference_frames: &[Frame], source: &FlowSource) -> Result<Vec<FlowField>> {
    match source {
        FlowSource::BlockMatching { block, radius } => successive_flows(reference_frames, *block, *radius),
        FlowSource::FloDir { path } => {
            let flows = read_flo_dir(path)?;
            let need = reference_frames.len().saturating_sub(1);
            if flows.len() < need {
                return Err(Error::InvalidInput(format!(
                    "{} holds {} .flo files, {need} needed",
                    path.display(),
                    flows.len()
                )));
            }
            let flows: Vec<FlowField> = flows.into_iter().take(need).collect();
            if let (Some(frame), Some(flow)) = (reference_frames.first(), flows.first()) {
                if (frame.width(), frame.height()) != (flow.width(), flow.height()) {
                    return Err(Error::Shape(format!(
                        "flow {}x{} does not match frames {}x{}",
                        flow.width(),
                        flow.height(),
                        frame.width(),
                        frame.height()
                    )));
                }
            }
            Ok(flows)
        }
    }
}

/// Full preprocessing leg: flows between successive reference frames, then
/// masks at every resolution.
pub fn build_mask_pyramid(
    reference_frames: &[Frame],
    resolutions: &[usize],
    source: &FlowSource,
    options: &MaskOptions,
) -> Result<MaskPyramid> {
    if reference_frames.len() < 2 {
        return Err(Error::InvalidInput("mask pyramid needs at least 2 reference frames".into()));
    }
    let flows = reference_flows(reference_frames, source)?;
    MaskPyramid::from_flows(&flows, resolutions, options)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_entries_starting_red() {
        let wheel = color_wheel();
        assert_eq!(wheel.len(), 55);
        assert_eq!(wheel[0], [255.0, 0.0, 0.0]);
        assert_eq!(wheel[15], [255.0, 255.0, 0.0]);
    }

    #[test]
    fn zero_flow_is_white() {
        let rgb = flow_to_rgb(&FlowField::zeros(5, 4).unwrap());
        assert!(rgb.pixels().iter().all(|&p| p == [255, 255, 255]));
    }

    #[test]
    fn flow_coding_is_scale_invariant() {
        let vectors: Vec<[f32; 2]> = (0..12).map(|i| [i as f32 - 5.0, (i * i) as f32 * 0.3 - 2.0]).collect();
        let a = FlowField::new(4, 3, vectors.clone()).unwrap();
        let b = FlowField::new(4, 3, vectors.iter().map(|[u, v]| [u * 2.0, v * 2.0]).collect()).unwrap();
        assert_eq!(flow_to_rgb(&a), flow_to_rgb(&b));
    }

    #[test]
    fn opposite_vectors_share_saturation_not_hue() {
        let f = FlowField::new(2, 1, vec![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        let rgb = flow_to_rgb(&f);
        let (a, b) = (rgb.get(0, 0), rgb.get(1, 0));
        assert_ne!(a, b);
        // both sit on the rim of the wheel: one channel fully saturated out
        assert_eq!(a.iter().min(), Some(&0));
        assert_eq!(b.iter().min(), Some(&0));
        assert_eq!(a.iter().max(), Some(&255));
        assert_eq!(b.iter().max(), Some(&255));
    }

    #[test]
    fn still_flow_gives_static_masks() {
        let gray = flow_to_gray(&FlowField::zeros(16, 16).unwrap());
        for res in [16, 8, 4] {
            let m = build_mask(&gray, res, 2, UniformMotionPolicy::Moving).unwrap();
            assert_eq!(m.popcount(), 0);
        }
    }

    #[test]
    fn uniform_pan_follows_policy() {
        let gray = flow_to_gray(&FlowField::uniform(16, 16, [3.0, 1.0]).unwrap());
        assert_eq!(build_mask(&gray, 8, 2, UniformMotionPolicy::Static).unwrap().popcount(), 0);
        assert_eq!(build_mask(&gray, 8, 2, UniformMotionPolicy::Moving).unwrap().popcount(), 64);
    }

    #[test]
    fn left_half_motion_marks_left_half() {
        let vectors = (0..32 * 32)
            .map(|i| if i % 32 < 16 { [6.0, 0.0] } else { [0.0, 0.0] })
            .collect();
        let flow = FlowField::new(32, 32, vectors).unwrap();
        let gray = flow_to_gray(&flow);
        for res in [16, 8, 4] {
            let m = build_mask(&gray, res, 2, UniformMotionPolicy::Static).unwrap();
            for (i, &bit) in m.bits().iter().enumerate() {
                assert_eq!(bit, i % res < res / 2, "res {res} cell {i}");
            }
        }
    }

    #[test]
    fn magnitude_mode_thresholds_cell_means() {
        let vectors = (0..8 * 8).map(|i| if i % 8 < 4 { [0.0, 2.0] } else { [0.0, 0.0] }).collect();
        let flow = FlowField::new(8, 8, vectors).unwrap();
        let opts = MaskOptions { mode: MaskMode::Magnitude { threshold: 1.0 }, ..Default::default() };
        let p = MaskPyramid::from_flows(&[flow], &[2], &opts).unwrap();
        assert_eq!(p.get(2, 2).unwrap().bits(), &[true, false, true, false]);
    }

    #[test]
    fn fixed_density_has_exact_popcount() {
        let m = fixed_density_mask(8, 8, 3, 0.25, 9).unwrap();
        assert_eq!(m.popcount(), 16);
        assert_eq!(m, fixed_density_mask(8, 8, 3, 0.25, 9).unwrap());
        assert!(fixed_density_mask(8, 8, 3, 1.5, 9).is_err());
    }

    #[test]
    fn pyramid_counts_and_round_trip() {
        let flows: Vec<FlowField> = (0..4)
            .map(|k| {
                let v = (0..32 * 32).map(|i| if (i / 32) < 8 * k { [2.0, 1.0] } else { [0.0, 0.0] }).collect();
                FlowField::new(32, 32, v).unwrap()
            })
            .collect();
        let p = MaskPyramid::from_flows(&flows, &[16, 8, 4], &MaskOptions::default()).unwrap();
        assert_eq!(p.len(), 12);
        p.validate_coverage(5, &[16, 8, 4]).unwrap();
        assert!(p.validate_coverage(6, &[16]).is_err());

        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        assert_eq!(MaskPyramid::load(dir.path()).unwrap(), p);
    }

    #[test]
    fn mask_frame_index_must_exceed_one() {
        assert!(MotionMask::filled(1, 2, 2, false).is_err());
    }

    #[test]
    fn non_square_grids_keep_aspect() {
        assert_eq!(grid_dims(8, 32, 16), (8, 16));
        assert_eq!(grid_dims(8, 20, 16), (8, 10));
    }
}
