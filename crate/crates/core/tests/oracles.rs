mod common;

use std::collections::BTreeSet;

use adave_core::attention::{
    build_sparse_kv, extend_kv_full, kv_token_count, self_attention, sesa, FrameKv, SparseKV, TokenMatrix,
};
use adave_core::flow::{decode_flo, encode_flo, estimate_flow_block_matching, FlowField};
use adave_core::masks::{MaskPyramid, MotionMask};
use adave_core::media::{otsu_threshold, Otsu};
use common::*;
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    keys: Vec<TokenMatrix>,
    values: Vec<TokenMatrix>,
    q: TokenMatrix,
    masks: Vec<Vec<bool>>,
    rows: usize,
    r: usize,
    heads: usize,
}

fn instance(seed: u64, density: f64) -> Instance {
    let mut g = rng(seed);
    let z = g.random_range(1..=6usize);
    let rows = g.random_range(1..=6usize);
    let cols = g.random_range(1..=6usize);
    let t = rows * cols;
    let heads = [1usize, 2, 4][g.random_range(0..3)];
    let d = heads * g.random_range(1..=4usize);
    let keys = (0..z).map(|_| rand_matrix(&mut g, t, d)).collect();
    let values = (0..z).map(|_| rand_matrix(&mut g, t, d)).collect();
    let nq = g.random_range(1..=20);
    let q = rand_matrix(&mut g, nq, d);
    let masks = (0..z).map(|_| (0..t).map(|_| g.random_bool(density)).collect()).collect();
    Instance { keys, values, q, masks, rows, r: g.random_range(1..=4), heads }
}

/// Independent reading of the full-frame rule.
fn is_full(pos: usize, z: usize, r: usize) -> bool {
    pos == 1 || pos == z || pos.is_multiple_of(r)
}

#[test]
fn gather_matches_materialized_concatenation_bitwise() {
    for case in 0..100u64 {
        let density = [0.0, 0.25, 0.5, 1.0][case as usize % 4];
        let inst = instance(case, density);
        let z = inst.keys.len();
        let t = inst.keys[0].rows();
        let d = inst.q.cols();

        let mut pyramid = MaskPyramid::new();
        for i in 2..=z {
            pyramid.insert(MotionMask::new(i as u32, inst.rows, t / inst.rows, inst.masks[i - 1].clone()).unwrap()).unwrap();
        }
        let frames: Vec<FrameKv> = (0..z)
            .map(|i| FrameKv { frame_index: i as u32 + 1, keys: &inst.keys[i], values: &inst.values[i] })
            .collect();
        let sparse = build_sparse_kv(&frames, &pyramid, inst.rows, inst.r).unwrap();
        let got = sesa(&inst.q, &sparse, inst.heads).unwrap();

        let (mut kcat, mut vcat) = (Vec::new(), Vec::new());
        for i in 0..z {
            for p in 0..t {
                if is_full(i + 1, z, inst.r) || inst.masks[i][p] {
                    kcat.extend_from_slice(inst.keys[i].row(p));
                    vcat.extend_from_slice(inst.values[i].row(p));
                }
            }
        }
        let len = kcat.len() / d;
        assert_eq!(sparse.len(), len, "case {case}");
        assert_eq!(sparse.keys(), &kcat[..]);
        let want = naive_attention(&inst.q, &kcat, &vcat, len, inst.heads);
        assert_eq!(bits(got.data()), bits(&want), "case {case}");
    }
}

#[test]
fn sparse_length_matches_cost_model() {
    for case in 0..200u64 {
        let inst = instance(1000 + case, 0.4);
        let z = inst.keys.len();
        let t = inst.keys[0].rows();
        let mut pyramid = MaskPyramid::new();
        for i in 2..=z {
            pyramid.insert(MotionMask::new(i as u32, inst.rows, t / inst.rows, inst.masks[i - 1].clone()).unwrap()).unwrap();
        }
        let frames: Vec<FrameKv> = (0..z)
            .map(|i| FrameKv { frame_index: i as u32 + 1, keys: &inst.keys[i], values: &inst.values[i] })
            .collect();
        let sparse = build_sparse_kv(&frames, &pyramid, inst.rows, inst.r).unwrap();
        let popcounts: Vec<usize> = (2..=z).map(|i| inst.masks[i - 1].iter().filter(|&&b| b).count()).collect();
        assert_eq!(kv_token_count(z, t, &popcounts, inst.r).unwrap().kv_tokens, sparse.len());
        let frames_seen: BTreeSet<u32> = sparse.provenance().iter().map(|p| p.frame).collect();
        assert!(frames_seen.contains(&1) && frames_seen.contains(&(z as u32)));
    }
}

#[test]
fn kernel_matches_naive_on_long_sequences() {
    // exercises multiple query tiles and key blocks
    let mut g = rng(5);
    let (q, k, v) = (rand_matrix(&mut g, 37, 16), rand_matrix(&mut g, 1300, 16), rand_matrix(&mut g, 1300, 16));
    let got = self_attention(&q, &k, &v, 4).unwrap();
    assert_eq!(bits(got.data()), bits(&naive_attention(&q, k.data(), v.data(), 1300, 4)));
}

#[test]
fn otsu_matches_exhaustive_search() {
    let mut g = rng(99);
    for case in 0..1000 {
        let img = if case % 5 == 0 {
            // few distinct levels, many ties
            let levels: Vec<u8> = (0..g.random_range(1..4)).map(|_| g.random()).collect();
            let v = (0..256).map(|_| levels[g.random_range(0..levels.len())]).collect();
            adave_core::GrayImage::new(16, 16, v).unwrap()
        } else {
            noise_gray(16, 16, &mut g)
        };
        match (otsu_threshold(&img), exhaustive_otsu(img.values())) {
            (Otsu::Threshold(t), Some(o)) => assert_eq!(t, o, "case {case}"),
            (Otsu::Degenerate(v), None) => assert!(img.values().iter().all(|&x| x == v)),
            (a, b) => panic!("case {case}: {a:?} vs {b:?}"),
        }
    }
}

#[test]
fn integer_shifts_are_recovered_within_radius() {
    let base = noise_frame(64, 64, 17);
    for (dx, dy) in [(0i64, 0i64), (3, 0), (-2, 5), (4, -4), (-6, -1)] {
        let mut next = base.clone();
        for y in 0..64 {
            for x in 0..64 {
                let (sx, sy) = (x as i64 - dx, y as i64 - dy);
                if (0..64).contains(&sx) && (0..64).contains(&sy) {
                    next.set(x, y, base.get(sx as usize, sy as usize));
                }
            }
        }
        let flow = estimate_flow_block_matching(&base, &next, 8, 7).unwrap();
        for y in 16..48 {
            for x in 16..48 {
                assert_eq!(flow.get(x, y), [dx as f32, dy as f32], "shift ({dx},{dy}) at ({x},{y})");
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn all_ones_sparse_equals_full_extension(seed in 0u64..10_000, r in 1usize..5) {
        let mut inst = instance(seed, 1.0);
        inst.r = r;
        let z = inst.keys.len();
        let t = inst.keys[0].rows();
        let mut pyramid = MaskPyramid::new();
        for i in 2..=z {
            pyramid.insert(MotionMask::filled(i as u32, inst.rows, t / inst.rows, true).unwrap()).unwrap();
        }
        let frames: Vec<FrameKv> = (0..z)
            .map(|i| FrameKv { frame_index: i as u32 + 1, keys: &inst.keys[i], values: &inst.values[i] })
            .collect();
        let sparse = build_sparse_kv(&frames, &pyramid, inst.rows, r).unwrap();
        let full = extend_kv_full(&frames).unwrap();
        prop_assert_eq!(&sparse, &full);
    }

    #[test]
    fn sparse_kv_bytes_round_trip(seed in 0u64..10_000, density in 0.0f64..1.0) {
        let inst = instance(seed, density);
        let z = inst.keys.len();
        let t = inst.keys[0].rows();
        let mut pyramid = MaskPyramid::new();
        for i in 2..=z {
            pyramid.insert(MotionMask::new(i as u32, inst.rows, t / inst.rows, inst.masks[i - 1].clone()).unwrap()).unwrap();
        }
        let frames: Vec<FrameKv> = (0..z)
            .map(|i| FrameKv { frame_index: i as u32 + 1, keys: &inst.keys[i], values: &inst.values[i] })
            .collect();
        let sparse = build_sparse_kv(&frames, &pyramid, inst.rows, inst.r).unwrap();
        let bytes = sparse.to_bytes();
        prop_assert_eq!(bytes.len(), sparse.serialized_len());
        let back = SparseKV::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, sparse);
    }

    #[test]
    fn flo_round_trip(w in 1usize..12, h in 1usize..12, seed in 0u64..1000) {
        let mut g = rng(seed);
        let v: Vec<[f32; 2]> = (0..w * h).map(|_| [g.random_range(-50.0..50.0), g.random_range(-50.0..50.0)]).collect();
        let f = FlowField::new(w, h, v).unwrap();
        let bytes = encode_flo(&f);
        prop_assert_eq!(bytes.len(), 12 + 8 * w * h);
        prop_assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn attention_rows_are_convex_combinations(seed in 0u64..10_000) {
        // each output coordinate lies within the range of the value column
        let mut g = rng(seed);
        let len = g.random_range(1..40usize);
        let (q, k, v) = (rand_matrix(&mut g, 5, 8), rand_matrix(&mut g, len, 8), rand_matrix(&mut g, len, 8));
        let out = self_attention(&q, &k, &v, 2).unwrap();
        for c in 0..8 {
            let lo = (0..len).map(|j| v.row(j)[c]).fold(f32::INFINITY, f32::min);
            let hi = (0..len).map(|j| v.row(j)[c]).fold(f32::NEG_INFINITY, f32::max);
            for i in 0..5 {
                let x = out.row(i)[c];
                prop_assert!(x >= lo - 1e-5 && x <= hi + 1e-5);
            }
        }
    }

    #[test]
    fn sesa_with_all_ones_matches_dense_baseline(seed in 0u64..10_000) {
        let mut g = rng(seed);
        let z = g.random_range(1..=5usize);
        let t = g.random_range(4..=32usize);
        let heads = if g.random_bool(0.5) { 1 } else { 4 };
        let d = [8usize, 16, 32][g.random_range(0..3)];
        let keys: Vec<TokenMatrix> = (0..z).map(|_| rand_matrix(&mut g, t, d)).collect();
        let values: Vec<TokenMatrix> = (0..z).map(|_| rand_matrix(&mut g, t, d)).collect();
        let q = rand_matrix(&mut g, t, d);
        let frames: Vec<FrameKv> = (0..z)
            .map(|i| FrameKv { frame_index: i as u32 + 1, keys: &keys[i], values: &values[i] })
            .collect();
        let sparse = build_sparse_kv(&frames, &MaskPyramid::new(), t, 1).unwrap();
        let got = sesa(&q, &sparse, heads).unwrap();
        let pairs: Vec<(&TokenMatrix, &TokenMatrix)> = keys.iter().zip(&values).collect();
        prop_assert!(max_abs_diff_f64(got.data(), &dense_f64_attention(&q, &pairs, heads)) <= 1e-5);
    }
}
