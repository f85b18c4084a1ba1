use std::collections::BTreeSet;

use crate::attention::TokenMatrix;
use crate::error::{Error, Result};
use crate::masks::MaskPyramid;

pub const SPARSE_KV_LAYOUT_VERSION: u32 = 1;
/// `layout_version`, `L`, `d` as little-endian u32.
pub const SPARSE_KV_HEADER_BYTES: usize = 12;

/// Where a gathered token came from: video frame index and row-major
/// position in that frame's token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Provenance {
    pub frame: u32,
    pub position: u32,
}

/// Concatenated keys and values gathered from several frames, in canonical
/// `(frame, position)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseKV {
    keys: Vec<f32>,
    values: Vec<f32>,
    dim: usize,
    provenance: Vec<Provenance>,
    layout_version: u32,
}

impl SparseKV {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn layout_version(&self) -> u32 {
        self.layout_version
    }

    /// Distinct source frames, ascending.
    pub fn source_frames(&self) -> BTreeSet<u32> {
        self.provenance.iter().map(|p| p.frame).collect()
    }

    /// Key, value and provenance bytes: `2·L·d·4 + 8·L`.
    pub fn payload_bytes(&self) -> usize {
        payload_bytes(self.len(), self.dim)
    }

    pub fn serialized_len(&self) -> usize {
        SPARSE_KV_HEADER_BYTES + self.payload_bytes()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(&self.layout_version.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in self.keys.iter().chain(&self.values) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for p in &self.provenance {
            out.extend_from_slice(&p.frame.to_le_bytes());
            out.extend_from_slice(&p.position.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < SPARSE_KV_HEADER_BYTES {
            return Err(Error::format("SparseKV", "header truncated"));
        }
        let word = |i: usize| u32::from_le_bytes([bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]]);
        let version = word(0);
        if version != SPARSE_KV_LAYOUT_VERSION {
            return Err(Error::format(
                "SparseKV",
                format!("layout version {version}, expected {SPARSE_KV_LAYOUT_VERSION}"),
            ));
        }
        let (len, dim) = (word(4) as usize, word(8) as usize);
        let expected = SPARSE_KV_HEADER_BYTES + payload_bytes(len, dim);
        if bytes.len() != expected {
            return Err(Error::format(
                "SparseKV",
                format!("{} bytes for L={len}, d={dim}; expected {expected}", bytes.len()),
            ));
        }
        let floats = |start: usize, count: usize| -> Vec<f32> {
            bytes[start..start + count * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect()
        };
        let n = len * dim;
        let keys = floats(SPARSE_KV_HEADER_BYTES, n);
        let values = floats(SPARSE_KV_HEADER_BYTES + 4 * n, n);
        let prov_start = SPARSE_KV_HEADER_BYTES + 8 * n;
        let provenance: Vec<Provenance> = bytes[prov_start..]
            .chunks_exact(8)
            .map(|c| Provenance {
                frame: u32::from_le_bytes([c[0], c[1], c[2], c[3]]),
                position: u32::from_le_bytes([c[4], c[5], c[6], c[7]]),
            })
            .collect();
        if provenance.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::format("SparseKV", "provenance not strictly ordered"));
        }
        Ok(SparseKV { keys, values, dim, provenance, layout_version: version })
    }
}

pub(crate) fn payload_bytes(len: usize, dim: usize) -> usize {
    2 * len * dim * 4 + 8 * len
}

/// One frame's projected keys and values, tagged with its video frame index.
#[derive(Debug, Clone, Copy)]
pub struct FrameKv<'a> {
    pub frame_index: u32,
    pub keys: &'a TokenMatrix,
    pub values: &'a TokenMatrix,
}

/// Reference positions (1-based) whose tokens all enter the sparse KV:
/// `{1} ∪ {i ≤ z : i mod r = 0} ∪ {z}`.
pub fn full_frame_indices(z: usize, r: usize) -> BTreeSet<usize> {
    let mut set = BTreeSet::new();
    if z == 0 {
        return set;
    }
    set.insert(1);
    set.insert(z);
    if r >= 1 {
        set.extend((r..=z).step_by(r));
    }
    set
}

fn canonical_frames<'a>(frames: &[FrameKv<'a>]) -> Result<(Vec<FrameKv<'a>>, usize, usize)> {
    let Some(first) = frames.first() else {
        return Err(Error::InvalidInput("no frames to extend over".into()));
    };
    let (t, d) = (first.keys.rows(), first.keys.cols());
    for f in frames {
        for m in [f.keys, f.values] {
            if (m.rows(), m.cols()) != (t, d) {
                return Err(Error::Shape(format!(
                    "frame {} has {}x{} projections, expected {t}x{d}",
                    f.frame_index,
                    m.rows(),
                    m.cols()
                )));
            }
        }
    }
    let mut sorted = frames.to_vec();
    sorted.sort_by_key(|f| f.frame_index);
    if sorted.windows(2).any(|w| w[0].frame_index == w[1].frame_index) {
        return Err(Error::InvalidInput("duplicate frame index in KV extension".into()));
    }
    Ok((sorted, t, d))
}

fn gather(sorted: &[FrameKv<'_>], d: usize, select: impl Fn(usize, &FrameKv<'_>) -> Result<Option<Vec<usize>>>) -> Result<SparseKV> {
    let mut keys = Vec::new();
    let mut values = Vec::new();
    let mut provenance = Vec::new();
    for (rank, f) in sorted.iter().enumerate() {
        let positions: Vec<usize> = match select(rank + 1, f)? {
            Some(p) => p,
            None => (0..f.keys.rows()).collect(),
        };
        for pos in positions {
            keys.extend_from_slice(f.keys.row(pos));
            values.extend_from_slice(f.values.row(pos));
            provenance.push(Provenance { frame: f.frame_index, position: pos as u32 });
        }
    }
    Ok(SparseKV { keys, values, dim: d, provenance, layout_version: SPARSE_KV_LAYOUT_VERSION })
}

/// Fully extended KV: every token of every frame.
pub fn extend_kv_full(frames: &[FrameKv<'_>]) -> Result<SparseKV> {
    let (sorted, _, d) = canonical_frames(frames)?;
    gather(&sorted, d, |_, _| Ok(None))
}

/// Motion-gathered KV at one attention resolution. Frames are ranked by
/// frame index into reference positions `1..=Z`; positions in
/// [`full_frame_indices`] contribute every token, the others contribute
/// only the tokens their mask marks as moving.
pub fn build_sparse_kv(frames: &[FrameKv<'_>], masks: &MaskPyramid, res: usize, r: usize) -> Result<SparseKV> {
    if r == 0 {
        return Err(Error::InvalidInput("full-frame interval r must be >= 1".into()));
    }
    let (sorted, t, d) = canonical_frames(frames)?;
    let full = full_frame_indices(sorted.len(), r);
    gather(&sorted, d, |pos, _| {
        if full.contains(&pos) {
            return Ok(None);
        }
        let mask = masks.get(pos as u32, res).ok_or_else(|| {
            Error::InvalidInput(format!("mask missing for reference position {pos} at resolution {res}"))
        })?;
        if mask.rows() * mask.cols() != t {
            return Err(Error::Shape(format!(
                "mask {}x{} does not cover {t} tokens",
                mask.rows(),
                mask.cols()
            )));
        }
        Ok(Some(mask.moving_positions().collect()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masks::MotionMask;

    fn tm(rows: usize, cols: usize, base: f32) -> TokenMatrix {
        TokenMatrix::new(rows, cols, (0..rows * cols).map(|i| base + i as f32).collect()).unwrap()
    }

    #[test]
    fn full_indices_examples() {
        let v = |z, r| full_frame_indices(z, r).into_iter().collect::<Vec<_>>();
        assert_eq!(v(8, 4), vec![1, 4, 8]);
        assert_eq!(v(6, 1), vec![1, 2, 3, 4, 5, 6]);
        assert_eq!(v(5, 10), vec![1, 5]);
        assert_eq!(v(20, 8), vec![1, 8, 16, 20]);
        assert_eq!(v(1, 3), vec![1]);
    }

    #[test]
    fn single_frame_extension_is_identity() {
        let (k, v) = (tm(4, 2, 0.0), tm(4, 2, 100.0));
        let kv = extend_kv_full(&[FrameKv { frame_index: 1, keys: &k, values: &v }]).unwrap();
        assert_eq!(kv.keys(), k.data());
        assert_eq!(kv.values(), v.data());
        let sparse = build_sparse_kv(&[FrameKv { frame_index: 1, keys: &k, values: &v }], &MaskPyramid::new(), 2, 4).unwrap();
        assert_eq!(sparse, kv);
    }

    #[test]
    fn provenance_covers_every_token() {
        let mats: Vec<(TokenMatrix, TokenMatrix)> = (0..3).map(|i| (tm(4, 2, i as f32), tm(4, 2, -(i as f32)))).collect();
        let frames: Vec<FrameKv> = mats
            .iter()
            .enumerate()
            .map(|(i, (k, v))| FrameKv { frame_index: i as u32 + 1, keys: k, values: v })
            .collect();
        let kv = extend_kv_full(&frames).unwrap();
        assert_eq!(kv.len(), 12);
        assert_eq!(kv.provenance()[0], Provenance { frame: 1, position: 0 });
        assert_eq!(kv.provenance()[11], Provenance { frame: 3, position: 3 });
    }

    #[test]
    fn gathers_only_moving_tokens() {
        let mats: Vec<(TokenMatrix, TokenMatrix)> = (0..3).map(|i| (tm(4, 1, 10.0 * i as f32), tm(4, 1, 0.0))).collect();
        let frames: Vec<FrameKv> = mats
            .iter()
            .enumerate()
            .map(|(i, (k, v))| FrameKv { frame_index: 10 + 5 * i as u32, keys: k, values: v })
            .collect();
        let mut masks = MaskPyramid::new();
        masks.insert(MotionMask::new(2, 2, 2, vec![false, true, false, true]).unwrap()).unwrap();
        let kv = build_sparse_kv(&frames, &masks, 2, 5).unwrap();
        // positions 1 and 3 full; position 2 (frame 15) keeps tokens 1 and 3
        assert_eq!(kv.len(), 10);
        let from_15: Vec<u32> = kv.provenance().iter().filter(|p| p.frame == 15).map(|p| p.position).collect();
        assert_eq!(from_15, vec![1, 3]);
        assert_eq!(&kv.keys()[4..6], &[11.0, 13.0]);
    }

    #[test]
    fn missing_or_mismatched_mask_is_an_error() {
        let (k, v) = (tm(4, 1, 0.0), tm(4, 1, 0.0));
        let frames: Vec<FrameKv> = (1..=3).map(|i| FrameKv { frame_index: i, keys: &k, values: &v }).collect();
        assert!(build_sparse_kv(&frames, &MaskPyramid::new(), 2, 5).is_err());
        let mut masks = MaskPyramid::new();
        masks.insert(MotionMask::filled(2, 3, 3, true).unwrap()).unwrap();
        assert!(matches!(build_sparse_kv(&frames, &masks, 3, 5), Err(Error::Shape(_))));
        assert!(build_sparse_kv(&frames, &masks, 3, 0).is_err());
    }

    #[test]
    fn heterogeneous_shapes_are_rejected() {
        let (a, b) = (tm(4, 2, 0.0), tm(3, 2, 0.0));
        let frames = [FrameKv { frame_index: 1, keys: &a, values: &a }, FrameKv { frame_index: 2, keys: &b, values: &b }];
        assert!(matches!(extend_kv_full(&frames), Err(Error::Shape(_))));
    }

    #[test]
    fn wire_format_errors() {
        let (k, v) = (tm(2, 2, 0.5), tm(2, 2, -0.5));
        let kv = extend_kv_full(&[FrameKv { frame_index: 3, keys: &k, values: &v }]).unwrap();
        let bytes = kv.to_bytes();
        assert_eq!(bytes.len(), kv.serialized_len());
        assert_eq!(SparseKV::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        assert!(SparseKV::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong_version = bytes.clone();
        wrong_version[0] = 9;
        assert!(SparseKV::from_bytes(&wrong_version).is_err());
        let mut unordered = bytes.clone();
        let n = unordered.len();
        unordered[n - 4..].copy_from_slice(&0u32.to_le_bytes());
        assert!(SparseKV::from_bytes(&unordered).is_err());
    }

    #[test]
    fn payload_arithmetic() {
        assert_eq!(payload_bytes(272, 8), 19_584);
        assert_eq!(payload_bytes(0, 8), 0);
    }
}
