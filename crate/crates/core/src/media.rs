//! Raster images, grayscale conversion, box downsampling, Otsu thresholding
//! and frame-sequence file I/O (PNG frames, binary PGM grays/masks).

use std::cmp::Ordering;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// 8-bit RGB raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    width: usize,
    height: usize,
    pixels: Vec<[u8; 3]>,
}

impl Frame {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("frame must be non-empty, got {width}x{height}")));
        }
        if pixels.len() != width * height {
            return Err(Error::Shape(format!(
                "frame {width}x{height} needs {} pixels, got {}",
                width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, vec![rgb; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[[u8; 3]] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        self.pixels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        self.pixels[y * self.width + x] = rgb;
    }
}

/// 8-bit single-channel raster, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    width: usize,
    height: usize,
    values: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, values: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!("image must be non-empty, got {width}x{height}")));
        }
        if values.len() != width * height {
            return Err(Error::Shape(format!(
                "gray image {width}x{height} needs {} values, got {}",
                width * height,
                values.len()
            )));
        }
        Ok(Self { width, height, values })
    }

    pub fn filled(width: usize, height: usize, value: u8) -> Result<Self> {
        Self::new(width, height, vec![value; width * height])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[u8] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.values[y * self.width + x]
    }
}

/// BT.601 luma with round-half-up, computed in integer arithmetic so the
/// rounding is exact.
pub fn rgb_to_gray(frame: &Frame) -> GrayImage {
    let values = frame
        .pixels
        .iter()
        .map(|&[r, g, b]| luma(r, g, b))
        .collect();
    GrayImage { width: frame.width, height: frame.height, values }
}

#[inline]
pub(crate) fn luma(r: u8, g: u8, b: u8) -> u8 {
    let weighted = 299 * r as u32 + 587 * g as u32 + 114 * b as u32;
    ((weighted + 500) / 1000).min(255) as u8
}

/// Source index range `[start, end)` covered by output cell `i` when
/// mapping `src` samples onto `dst` cells.
#[inline]
pub fn cell_span(i: usize, src: usize, dst: usize) -> (usize, usize) {
    (i * src / dst, (i + 1) * src / dst)
}

/// Box-filter downsampling. Each output cell is the rounded mean of the
/// source pixels in its area-mapped rectangle.
pub fn downsample_avg(image: &GrayImage, target_w: usize, target_h: usize) -> Result<GrayImage> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::InvalidInput("downsample target must be at least 1x1".into()));
    }
    if target_w > image.width || target_h > image.height {
        return Err(Error::InvalidInput(format!(
            "downsample target {target_w}x{target_h} exceeds source {}x{}",
            image.width, image.height
        )));
    }
    let mut values = Vec::with_capacity(target_w * target_h);
    for ty in 0..target_h {
        let (y0, y1) = cell_span(ty, image.height, target_h);
        for tx in 0..target_w {
            let (x0, x1) = cell_span(tx, image.width, target_w);
            let mut sum = 0u64;
            for y in y0..y1 {
                let row = &image.values[y * image.width..(y + 1) * image.width];
                sum += row[x0..x1].iter().map(|&v| v as u64).sum::<u64>();
            }
            let n = ((y1 - y0) * (x1 - x0)) as u64;
            values.push(((sum + n / 2) / n) as u8);
        }
    }
    Ok(GrayImage { width: target_w, height: target_h, values })
}

/// Outcome of Otsu thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Otsu {
    /// Classes are `{v <= t}` and `{v > t}`.
    Threshold(u8),
    /// Every pixel has this single value; no split exists.
    Degenerate(u8),
}

/// Between-class variance of one split, kept as the exact rational
/// `diff^2 / prod` (up to a positive constant shared by every split).
#[derive(Debug, Clone, Copy)]
struct SplitScore {
    diff_sq: u128,
    prod: u128,
}

impl SplitScore {
    const ZERO: SplitScore = SplitScore { diff_sq: 0, prod: 1 };

    fn cmp(&self, other: &SplitScore) -> Ordering {
        let (qa, ra) = (self.diff_sq / self.prod, self.diff_sq % self.prod);
        let (qb, rb) = (other.diff_sq / other.prod, other.diff_sq % other.prod);
        match qa.cmp(&qb) {
            Ordering::Equal => {}
            o => return o,
        }
        match (ra.checked_mul(other.prod), rb.checked_mul(self.prod)) {
            (Some(a), Some(b)) => a.cmp(&b),
            _ => {
                let a = ra as f64 / self.prod as f64;
                let b = rb as f64 / other.prod as f64;
                a.partial_cmp(&b).unwrap_or(Ordering::Equal)
            }
        }
    }
}

/// Otsu's threshold: the smallest `t` maximizing between-class variance.
///
/// Scores are compared exactly (integer rationals), so plateaus of equal
/// variance resolve to their lowest threshold deterministically.
pub fn otsu_threshold(image: &GrayImage) -> Otsu {
    otsu_from_histogram(&histogram(image.values()))
}

pub fn histogram(values: &[u8]) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for &v in values {
        hist[v as usize] += 1;
    }
    hist
}

pub fn otsu_from_histogram(hist: &[u64; 256]) -> Otsu {
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(v, &c)| v as u64 * c).sum();
    let occupied = hist.iter().filter(|&&c| c > 0).count();
    if occupied <= 1 {
        let value = hist.iter().position(|&c| c > 0).unwrap_or(0) as u8;
        return Otsu::Degenerate(value);
    }

    let mut best_t = 0u8;
    let mut best = SplitScore::ZERO;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (t, &count) in hist.iter().enumerate() {
        n0 += count;
        s0 += t as u64 * count;
        let n1 = total - n0;
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let s1 = total_sum - s0;
        let diff = (s0 as i128) * (n1 as i128) - (s1 as i128) * (n0 as i128);
        let score = SplitScore {
            diff_sq: diff.unsigned_abs() * diff.unsigned_abs(),
            prod: n0 as u128 * n1 as u128,
        };
        if score.cmp(&best) == Ordering::Greater {
            best = score;
            best_t = t as u8;
        }
    }
    Otsu::Threshold(best_t)
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

pub fn read_png(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let pixels = rgb.pixels().map(|p| p.0).collect();
    Frame::new(w as usize, h as usize, pixels)
}

pub fn write_frame(frame: &Frame, path: &Path) -> Result<()> {
    let raw: Vec<u8> = frame.pixels.iter().flat_map(|p| p.iter().copied()).collect();
    image::save_buffer(
        path,
        &raw,
        frame.width as u32,
        frame.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image { path: path.to_path_buf(), message: other.to_string() },
    })
}

/// Trailing decimal index in a file stem, e.g. `f_012` -> 12.
pub(crate) fn trailing_index(path: &Path) -> Option<u64> {
    let stem = path.file_stem()?.to_str()?;
    let digits: String = stem
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

/// Files in `dir` with extension `ext`, ordered by the numeric index
/// embedded at the end of their names (falling back to the name).
pub fn list_indexed_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let matches = path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case(ext));
        if matches && path.is_file() {
            files.push(path);
        }
    }
    files.sort_by(|a, b| {
        trailing_index(a)
            .cmp(&trailing_index(b))
            .then_with(|| a.file_name().cmp(&b.file_name()))
    });
    Ok(files)
}

/// Reads every PNG in `dir`, ordered by filename index. All frames must
/// share dimensions.
pub fn read_frame_sequence(dir: &Path) -> Result<Vec<Frame>> {
    let files = list_indexed_files(dir, "png")?;
    let mut frames: Vec<Frame> = Vec::with_capacity(files.len());
    for path in &files {
        let frame = read_png(path)?;
        if let Some(first) = frames.first() {
            if (first.width, first.height) != (frame.width, frame.height) {
                return Err(Error::Shape(format!(
                    "{} is {}x{}, sequence is {}x{}",
                    path.display(),
                    frame.width,
                    frame.height,
                    first.width,
                    first.height
                )));
            }
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn write_frame_sequence(frames: &[Frame], dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let path = dir.join(format!("{prefix}{i:04}.png"));
            write_frame(f, &path).map(|_| path)
        })
        .collect()
}

pub fn encode_pgm(image: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.values);
    out
}

pub fn write_pgm(image: &GrayImage, path: &Path) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&encode_pgm(image)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes)
}

/// Parses binary PGM (P5, maxval 255). Comments are accepted in the header.
pub fn decode_pgm(bytes: &[u8]) -> Result<GrayImage> {
    let bad = |m: &str| Error::format("PGM", m.to_string());
    let mut pos = 0usize;
    let mut fields: Vec<String> = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad(&format!("unsupported magic {:?}", fields[0])));
    }
    let parse = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| bad(&format!("bad {what} {s:?}")))
    };
    let width = parse(&fields[1], "width")?;
    let height = parse(&fields[2], "height")?;
    let maxval = parse(&fields[3], "maxval")?;
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval} unsupported (expected 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(bad(&format!("raster truncated: need {need} bytes")));
    }
    GrayImage::new(width, height, bytes[pos..pos + need].to_vec())
}
