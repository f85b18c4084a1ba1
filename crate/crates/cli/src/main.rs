use std::path::PathBuf;
use std::process::ExitCode;

use adave_core::error::{Error, ErrorClass};
use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;

/// Motion-adaptive sparse attention video editing toolkit.
#[derive(Debug, Parser)]
#[command(name = "adave", version, about, propagate_version = true)]
struct Cli {
    /// Worker threads (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Seed for every randomized step; overrides config files.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// More log output (-v info, -vv debug). ADAVE_LOG takes precedence.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate optical flow between successive frames and write .flo files.
    Flow(FlowArgs),
    /// Build motion-mask PGMs at each attention resolution.
    Masks(MaskArgs),
    /// Run the two-pass editing pipeline from a JSON config.
    Edit(EditArgs),
    /// Time sparse against fully extended attention.
    Bench(BenchArgs),
    /// Mean warping error of a frame sequence under its flows.
    WarpError(WarpArgs),
    /// Byte breakdown of a saved KV cache and frame budget inversion.
    Memory(MemoryArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum FlowMethod {
    BlockMatching,
}

#[derive(Debug, Args)]
struct FlowArgs {
    /// Directory of indexed PNG frames.
    #[arg(long)]
    frames: PathBuf,
    /// Output directory for flow_NNNN.flo files.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "block-matching")]
    method: FlowMethod,
    /// Tile size in pixels.
    #[arg(long, default_value_t = 8)]
    block: usize,
    /// Search radius in pixels.
    #[arg(long, default_value_t = 8)]
    radius: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MaskModeArg {
    Otsu,
    Magnitude,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum UniformArg {
    Static,
    Moving,
}

#[derive(Debug, Args)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["frames", "flows"])))]
struct MaskArgs {
    /// Directory of indexed PNG frames; flow is estimated between references.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Directory of .flo files, one per successive reference pair.
    #[arg(long)]
    flows: Option<PathBuf>,
    /// Token grid heights, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    resolutions: Vec<usize>,
    /// Output directory for PGMs and summary.json.
    #[arg(long)]
    out: PathBuf,
    /// Reference interval applied to --frames.
    #[arg(short = 's', long = "interval", default_value_t = 1)]
    interval: usize,
    #[arg(long, value_enum, default_value = "otsu")]
    mode: MaskModeArg,
    /// Flow magnitude threshold in pixels for --mode magnitude.
    #[arg(long, default_value_t = 0.5)]
    threshold: f32,
    /// Replace flow-derived masks by seeded masks of this density.
    #[arg(long)]
    density: Option<f64>,
    /// Treatment of a single non-white flow color across the frame.
    #[arg(long, value_enum, default_value = "static")]
    uniform_motion: UniformArg,
    #[arg(long, default_value_t = 8)]
    block: usize,
    #[arg(long, default_value_t = 8)]
    radius: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum KvModeArg {
    Sparse,
    Full,
}

#[derive(Debug, Args)]
struct EditArgs {
    /// JSON edit config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory for report.json and latents.bin.
    #[arg(long)]
    out: PathBuf,
    /// Use this PNG directory instead of the config's input.
    #[arg(long)]
    frames: Option<PathBuf>,
    /// Reference interval s.
    #[arg(short = 's', long = "interval")]
    interval: Option<usize>,
    /// Full-frame interval r.
    #[arg(short = 'r', long = "full-interval")]
    full_interval: Option<usize>,
    /// Seeded masks of this density instead of flow-derived ones.
    #[arg(long)]
    density: Option<f64>,
    /// Block resolutions, comma separated.
    #[arg(long, value_delimiter = ',')]
    resolutions: Option<Vec<usize>>,
    /// Explicit descending timesteps, comma separated.
    #[arg(long, value_delimiter = ',', conflicts_with = "steps")]
    timesteps: Option<Vec<u32>>,
    /// Evenly spaced timesteps out of 1000.
    #[arg(long)]
    steps: Option<u32>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long, value_enum)]
    kv_mode: Option<KvModeArg>,
    /// Also write the sealed KV cache to OUT/cache.
    #[arg(long)]
    save_cache: bool,
    /// Also write the mask pyramid to OUT/masks.
    #[arg(long)]
    save_masks: bool,
}

#[derive(Debug, Args)]
struct BenchArgs {
    /// JSON bench config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    z: Option<usize>,
    /// Tokens per frame.
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(short = 'r', long = "full-interval")]
    full_interval: Option<usize>,
    /// Mask density; several values run a grid.
    #[arg(long, value_delimiter = ',')]
    density: Option<Vec<f64>>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Query rows timed per call (default: one frame).
    #[arg(long)]
    query_tokens: Option<usize>,
    /// Write the JSON report here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write a CSV flattening.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct WarpArgs {
    #[arg(long)]
    frames: PathBuf,
    /// Directory of .flo files; flow i maps frame i to frame i+1.
    #[arg(long)]
    flows: PathBuf,
    /// Print as a percentage of full scale.
    #[arg(long)]
    scaled: bool,
}

#[derive(Debug, Args)]
struct MemoryArgs {
    /// Directory written by `edit --save-cache`.
    #[arg(long)]
    cache: PathBuf,
    /// Byte budget for the frame-count inversion.
    #[arg(long, requires_all = ["tokens", "dim", "density", "full_interval"])]
    budget_bytes: Option<usize>,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    density: Option<f64>,
    #[arg(short = 'r', long = "full-interval")]
    full_interval: Option<usize>,
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        ErrorClass::Io => 2,
        ErrorClass::Validation => 3,
        ErrorClass::Internal => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 3 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ADAVE_LOG", level)).init();

    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_classes_map_to_exit_codes() {
        let io = Error::io("x", std::io::Error::new(std::io::ErrorKind::NotFound, "gone"));
        assert_eq!(exit_code(&io), 2);
        assert_eq!(exit_code(&Error::Config("bad".into())), 3);
        assert_eq!(exit_code(&Error::InvalidInput("bad".into())), 3);
        assert_eq!(exit_code(&Error::Invariant("broken".into())), 4);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
