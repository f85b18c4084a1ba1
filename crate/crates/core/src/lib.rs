//! Adaptive sparse extended attention for zero-shot video editing: media
//! I/O, optical flow, motion masks, attention kernels, the shared KV cache,
//! the two-pass editing pipeline and cost/latency measurement.

pub mod attention;
pub mod bench;
pub mod cache;
pub mod error;
pub mod flow;
pub mod masks;
pub mod media;
pub mod pipeline;
pub mod scene;

pub use attention::{SparseKV, TokenMatrix};
pub use cache::{CacheKey, KVCache};
pub use error::{CacheError, Error, ErrorClass, Result};
pub use flow::FlowField;
pub use masks::{MaskPyramid, MotionMask};
pub use media::{Frame, GrayImage};
pub use pipeline::{run_pipeline, EditConfig, PipelineOutput, RunReport};
