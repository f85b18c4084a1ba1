use std::fs;
use std::path::{Path, PathBuf};

use adave_core::bench::{self, BenchConfig, BenchReport};
use adave_core::cache::KVCache;
use adave_core::error::{Error, Result};
use adave_core::flow::{read_flo_dir, successive_flows, write_flo_sequence};
use adave_core::masks::{
    build_mask_pyramid, mask_file_name, FlowSource, MaskMode, MaskOptions, MaskPyramid, UniformMotionPolicy,
};
use adave_core::media::read_frame_sequence;
use adave_core::pipeline::{
    load_input_frames, run_pipeline, select_reference_frames, BlockSpec, EditConfig, InputSource, KvMode,
};
use serde::Serialize;

use super::{BenchArgs, Cli, Command, EditArgs, FlowArgs, KvModeArg, MaskArgs, MaskModeArg, MemoryArgs, UniformArg, WarpArgs};

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Config("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Invariant(format!("worker pool: {e}")))?;
    }
    match cli.command {
        Command::Flow(args) => flow(args),
        Command::Masks(args) => masks(args, cli.seed),
        Command::Edit(args) => edit(args, cli.seed, cli.workers),
        Command::Bench(args) => bench(args, cli.seed, cli.workers),
        Command::WarpError(args) => warp_error(args),
        Command::Memory(args) => memory(args),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Invariant(format!("serializing report: {e}")))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn flow(args: FlowArgs) -> Result<()> {
    let frames = read_frame_sequence(&args.frames)?;
    if frames.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "{} holds {} frame(s); flow needs at least 2",
            args.frames.display(),
            frames.len()
        )));
    }
    let flows = match args.method {
        super::FlowMethod::BlockMatching => successive_flows(&frames, args.block, args.radius)?,
    };
    create_dir(&args.out)?;
    for path in write_flo_sequence(&flows, &args.out)? {
        println!("{}", path.display());
    }
    Ok(())
}

#[derive(Serialize)]
struct MaskEntry {
    frame_index: u32,
    resolution: usize,
    rows: usize,
    cols: usize,
    popcount: usize,
    density: f64,
    file: String,
}

#[derive(Serialize)]
struct MaskSummary {
    reference_frames: Option<Vec<usize>>,
    resolutions: Vec<usize>,
    masks: Vec<MaskEntry>,
}

fn mask_options(mode: MaskModeArg, threshold: f32, density: Option<f64>, uniform: UniformArg, seed: u64) -> MaskOptions {
    let mode = match (density, mode) {
        (Some(density), _) => MaskMode::FixedDensity { density, seed },
        (None, MaskModeArg::Otsu) => MaskMode::Otsu,
        (None, MaskModeArg::Magnitude) => MaskMode::Magnitude { threshold },
    };
    let uniform_motion = match uniform {
        UniformArg::Static => UniformMotionPolicy::Static,
        UniformArg::Moving => UniformMotionPolicy::Moving,
    };
    MaskOptions { mode, uniform_motion }
}

fn masks(args: MaskArgs, seed: Option<u64>) -> Result<()> {
    if args.resolutions.is_empty() || args.resolutions.contains(&0) {
        return Err(Error::Config("--resolutions must list positive heights".into()));
    }
    let options = mask_options(args.mode, args.threshold, args.density, args.uniform_motion, seed.unwrap_or(0));
    let (pyramid, refs) = match (&args.frames, &args.flows) {
        (Some(dir), _) => {
            let frames = read_frame_sequence(dir)?;
            if args.interval == 0 || args.interval > frames.len() {
                return Err(Error::Config(format!("--interval must lie in [1, {}]", frames.len())));
            }
            let refs = select_reference_frames(frames.len(), args.interval);
            let ref_frames: Vec<_> = refs.iter().map(|&i| frames[i - 1].clone()).collect();
            let source = FlowSource::BlockMatching { block: args.block, radius: args.radius };
            (build_mask_pyramid(&ref_frames, &args.resolutions, &source, &options)?, Some(refs))
        }
        (None, Some(dir)) => {
            let flows = read_flo_dir(dir)?;
            if flows.is_empty() {
                return Err(Error::InvalidInput(format!("no .flo files in {}", dir.display())));
            }
            (MaskPyramid::from_flows(&flows, &args.resolutions, &options)?, None)
        }
        (None, None) => unreachable!("clap enforces a mask source"),
    };
    pyramid.save(&args.out)?;
    let summary = MaskSummary {
        reference_frames: refs,
        resolutions: args.resolutions.clone(),
        masks: pyramid
            .iter()
            .map(|m| MaskEntry {
                frame_index: m.frame_index(),
                resolution: m.rows(),
                rows: m.rows(),
                cols: m.cols(),
                popcount: m.popcount(),
                density: m.density(),
                file: mask_file_name(m.frame_index(), m.rows()),
            })
            .collect(),
    };
    let path = args.out.join("summary.json");
    write_json(&path, &summary)?;
    println!("{}", path.display());
    Ok(())
}

/// `n` evenly spaced timesteps out of 1000, descending.
fn even_timesteps(n: u32) -> Result<Vec<u32>> {
    if n == 0 || n > 1000 {
        return Err(Error::Config("--steps must lie in [1, 1000]".into()));
    }
    let stride = 1000 / n;
    Ok((0..n).rev().map(|i| i * stride + 1).collect())
}

fn apply_edit_overrides(cfg: &mut EditConfig, args: &EditArgs, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
    let s = &mut cfg.schedule;
    if let Some(v) = args.interval {
        s.reference_interval = v;
    }
    if let Some(v) = args.full_interval {
        s.full_frame_interval = v;
    }
    if let Some(seed) = seed {
        s.seed = seed;
        if let MaskMode::FixedDensity { seed: mask_seed, .. } = &mut cfg.masks.mode {
            *mask_seed = seed;
        }
    }
    if let Some(res) = &args.resolutions {
        if res.len() == s.blocks.len() {
            for (b, &r) in s.blocks.iter_mut().zip(res) {
                b.resolution = r;
            }
        } else {
            let channels = s.blocks.first().map(|b| b.channels).ok_or_else(|| Error::Config("config has no blocks".into()))?;
            s.blocks = res.iter().map(|&resolution| BlockSpec { resolution, channels }).collect();
        }
    }
    if let Some(ts) = &args.timesteps {
        s.timesteps = ts.clone();
    }
    if let Some(n) = args.steps {
        s.timesteps = even_timesteps(n)?;
    }
    if let Some(density) = args.density {
        cfg.masks.mode = MaskMode::FixedDensity { density, seed: cfg.schedule.seed };
    }
    if let Some(h) = args.heads {
        cfg.heads = h;
    }
    if let Some(mode) = args.kv_mode {
        cfg.kv_mode = match mode {
            KvModeArg::Sparse => KvMode::Sparse,
            KvModeArg::Full => KvMode::Full,
        };
    }
    if workers.is_some() {
        cfg.workers = workers;
    }
    if let Some(dir) = &args.frames {
        cfg.input = InputSource::Frames { dir: dir.clone() };
    }
    Ok(())
}

fn edit(args: EditArgs, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
    let mut cfg = EditConfig::load(&args.config)?;
    apply_edit_overrides(&mut cfg, &args, seed, workers)?;
    let frames = match &cfg.input {
        InputSource::Frames { dir } => {
            let frames = read_frame_sequence(dir)?;
            cfg.schedule.total_frames = frames.len();
            frames
        }
        InputSource::Synthetic { .. } => load_input_frames(&cfg)?,
    };
    let out = run_pipeline(&cfg, &frames)?;
    create_dir(&args.out)?;
    let latents = args.out.join("latents.bin");
    fs::write(&latents, out.output_bytes()).map_err(|e| Error::io(&latents, e))?;
    let report = args.out.join("report.json");
    write_json(&report, &out.report)?;
    let mut written: Vec<PathBuf> = vec![report, latents];
    if args.save_cache {
        let dir = args.out.join("cache");
        out.cache.save(&dir)?;
        written.push(dir);
    }
    if args.save_masks {
        let dir = args.out.join("masks");
        out.masks.save(&dir)?;
        written.push(dir);
    }
    for p in written {
        println!("{}", p.display());
    }
    Ok(())
}

fn default_bench_config() -> BenchConfig {
    BenchConfig {
        z: 8,
        tokens_per_frame: 1024,
        dim: 64,
        heads: 1,
        r: 4,
        density: 0.25,
        repetitions: 5,
        warmup: 3,
        query_tokens: None,
        seed: 0,
        multi_workers: None,
    }
}

#[derive(Serialize)]
struct GridReport {
    reports: Vec<BenchReport>,
    monotonicity_tolerance: f64,
    monotonicity_violations: usize,
    adjacent_pairs: usize,
}

fn bench(args: BenchArgs, seed: Option<u64>, workers: Option<usize>) -> Result<()> {
    let mut base = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => default_bench_config(),
    };
    macro_rules! set {
        ($field:ident, $arg:expr) => {
            if let Some(v) = $arg {
                base.$field = v;
            }
        };
    }
    set!(z, args.z);
    set!(tokens_per_frame, args.tokens);
    set!(dim, args.dim);
    set!(heads, args.heads);
    set!(r, args.full_interval);
    set!(repetitions, args.repetitions);
    set!(warmup, args.warmup);
    set!(seed, seed);
    if args.query_tokens.is_some() {
        base.query_tokens = args.query_tokens;
    }
    if workers.is_some() {
        base.multi_workers = workers;
    }
    let densities = args.density.clone().unwrap_or_else(|| vec![base.density]);
    let configs: Vec<BenchConfig> = densities.iter().map(|&density| BenchConfig { density, ..base.clone() }).collect();
    for c in &configs {
        c.validate()?;
    }
    let reports = configs.iter().map(bench::bench_attention).collect::<Result<Vec<_>>>()?;

    if let Some(path) = &args.csv {
        let mut text = String::from(bench::CSV_HEADER);
        text.push('\n');
        for r in &reports {
            for row in r.csv_rows() {
                text.push_str(&row);
                text.push('\n');
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))?;
    }
    let json = if reports.len() == 1 {
        serde_json::to_value(&reports[0])
    } else {
        let tolerance = 0.05;
        let (violations, pairs) = bench::latency_monotonicity(&reports, tolerance);
        serde_json::to_value(GridReport {
            reports,
            monotonicity_tolerance: tolerance,
            monotonicity_violations: violations,
            adjacent_pairs: pairs,
        })
    }
    .map_err(|e| Error::Invariant(format!("serializing report: {e}")))?;
    match &args.out {
        Some(path) => {
            write_json(path, &json)?;
            println!("{}", path.display());
        }
        None => println!("{}", serde_json::to_string_pretty(&json).expect("json value")),
    }
    Ok(())
}

fn warp_error(args: WarpArgs) -> Result<()> {
    let frames = read_frame_sequence(&args.frames)?;
    let flows = read_flo_dir(&args.flows)?;
    let e = bench::warp_error(&frames, &flows)?;
    let value = if args.scaled { e.scaled_x100 } else { e.mean_abs_diff };
    println!("{value:?}");
    Ok(())
}

fn memory(args: MemoryArgs) -> Result<()> {
    let cache = KVCache::load(&args.cache)?;
    let budget = match (args.budget_bytes, args.tokens, args.dim, args.density, args.full_interval) {
        (Some(b), Some(t), Some(d), Some(rho), Some(r)) => {
            if !(0.0..=1.0).contains(&rho) || r == 0 || t == 0 {
                return Err(Error::Config("budget query needs density in [0, 1] and positive tokens and r".into()));
            }
            Some((b, t, d, rho, r))
        }
        _ => None,
    };
    let report = bench::memory_report(&cache, budget)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("json value"));
    Ok(())
}
