mod common;

use adave_core::bench::{
    bench_attention, kv_bytes, latency_monotonicity, memory_report, sparse_kv_tokens, warp_error, BenchConfig,
};
use adave_core::cache::{CacheKey, KVCache};
use adave_core::flow::FlowField;
use adave_core::media::Frame;
use common::*;
use rand::Rng;

fn config(z: usize, t: usize, d: usize, r: usize, density: f64) -> BenchConfig {
    BenchConfig {
        z,
        tokens_per_frame: t,
        dim: d,
        heads: 1,
        r,
        density,
        repetitions: 5,
        warmup: 3,
        query_tokens: Some(64),
        seed: 1,
        multi_workers: None,
    }
}

/// Textured interior inside a flat margin wider than any tested shift.
fn padded_texture(w: usize, h: usize, margin: usize) -> Frame {
    let tex = noise_frame(w, h, 31);
    let mut f = Frame::filled(w, h, [90, 120, 150]).unwrap();
    for y in margin..h - margin {
        for x in margin..w - margin {
            f.set(x, y, tex.get(x, y));
        }
    }
    f
}

fn shifted(f: &Frame, dx: i64, dy: i64) -> Frame {
    let mut out = Frame::filled(f.width(), f.height(), f.get(0, 0)).unwrap();
    for y in 0..f.height() as i64 {
        for x in 0..f.width() as i64 {
            let (sx, sy) = (x - dx, y - dy);
            if sx >= 0 && sy >= 0 && sx < f.width() as i64 && sy < f.height() as i64 {
                out.set(x as usize, y as usize, f.get(sx as usize, sy as usize));
            }
        }
    }
    out
}

#[test]
fn warp_error_with_true_shift_is_near_zero() {
    let a = padded_texture(64, 48, 16);
    for (dx, dy) in [(3i64, -2i64), (-5, 4), (0, 6)] {
        let b = shifted(&a, dx, dy);
        let c = shifted(&b, dx, dy);
        let flow = FlowField::uniform(64, 48, [dx as f32, dy as f32]).unwrap();
        let e = warp_error(&[a.clone(), b, c], &[flow.clone(), flow]).unwrap();
        assert!(e.mean_abs_diff <= 0.5, "({dx},{dy}): {}", e.mean_abs_diff);
    }
    let zero = FlowField::zeros(64, 48).unwrap();
    assert_eq!(warp_error(&[a.clone(), a.clone()], std::slice::from_ref(&zero)).unwrap().mean_abs_diff, 0.0);
    let b = shifted(&a, 2, 0);
    assert!(warp_error(&[a, b], &[zero]).unwrap().mean_abs_diff > 0.0);
}

#[test]
fn memory_report_examples() {
    let mut empty = KVCache::new();
    empty.seal();
    let rep = memory_report(&empty, None).unwrap();
    assert_eq!(rep.cache.payload_bytes, 0);
    assert!(memory_report(&KVCache::new(), None).is_err());

    let mut g = rng(2);
    let (k, v) = (rand_matrix(&mut g, 272, 8), rand_matrix(&mut g, 272, 8));
    let kv = adave_core::attention::extend_kv_full(&[adave_core::attention::FrameKv { frame_index: 1, keys: &k, values: &v }]).unwrap();
    let mut cache = KVCache::new();
    cache.put(CacheKey::new(1, 0), kv.clone()).unwrap();
    cache.seal();
    let rep = memory_report(&cache, Some((kv_bytes(20 * 1024, 64), 1024, 64, 0.125, 8))).unwrap();
    assert_eq!(rep.cache.payload_bytes, 19_584);
    assert_eq!(rep.cache.serialized_bytes, kv.to_bytes().len());
    assert_eq!(rep.budget.unwrap().max_frames, 80);
}

#[test]
fn identical_work_has_unit_latency_ratio() {
    let mut cfg = config(4, 1024, 64, 1, 1.0);
    cfg.query_tokens = Some(128);
    cfg.repetitions = 9;
    let rep = bench_attention(&cfg).unwrap();
    assert_eq!(rep.kv_tokens_sparse, rep.kv_tokens_full);
    let ratio = rep.single_worker.latency_ratio;
    assert!((0.9..=1.1).contains(&ratio), "ratio {ratio}");
}

#[test]
fn measured_latency_ranks_like_modeled_flops() {
    let mut g = rng(77);
    let (mut agree, mut total) = (0, 0);
    while total < 20 {
        let z = g.random_range(4..=8usize);
        let t = [256usize, 512, 1024][g.random_range(0..3)];
        let r = g.random_range(2..=6usize);
        let density = g.random_range(0.0..0.5);
        if sparse_kv_tokens(z, t, density, r) * 5 > z * t * 4 {
            continue;
        }
        let mut cfg = config(z, t, 32, r, density);
        cfg.seed = total as u64;
        let rep = bench_attention(&cfg).unwrap();
        assert!(rep.flops_sparse < rep.flops_full);
        total += 1;
        if rep.single_worker.sparse.median_ms < rep.single_worker.full.median_ms {
            agree += 1;
        }
    }
    assert!(agree * 10 >= total * 9, "{agree}/{total} configs ranked like FLOPs");
}

#[test]
fn sparse_latency_is_monotone_over_density_grid() {
    let reports: Vec<_> = (0..=10)
        .map(|i| {
            let mut cfg = config(8, 1024, 64, 4, i as f64 / 10.0);
            cfg.query_tokens = Some(128);
            bench_attention(&cfg).unwrap()
        })
        .collect();
    for w in reports.windows(2) {
        assert!(w[0].kv_tokens_sparse <= w[1].kv_tokens_sparse);
        assert_eq!(w[0].flops_sparse * w[1].kv_tokens_sparse as u64, w[1].flops_sparse * w[0].kv_tokens_sparse as u64);
    }
    let (violations, pairs) = latency_monotonicity(&reports, 0.05);
    assert!(violations * 10 <= pairs, "{violations} of {pairs} adjacent pairs out of order");
}

#[test]
fn report_serializes_to_json() {
    let rep = bench_attention(&config(3, 64, 8, 2, 0.5)).unwrap();
    let json = serde_json::to_string(&rep).unwrap();
    let back: adave_core::bench::BenchReport = serde_json::from_str(&json).unwrap();
    assert_eq!(back.kv_tokens_sparse, rep.kv_tokens_sparse);
    assert_eq!(back.single_worker.sparse.samples_ms.len(), 5);
}
