use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masks::{grid_dims, FlowSource, MaskOptions};
use crate::scene::SceneSpec;

/// One self-attention block of the denoiser: token grid height and width
/// of its features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub resolution: usize,
    pub channels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// `N`
    pub total_frames: usize,
    /// `s`
    pub reference_interval: usize,
    /// `r`
    pub full_frame_interval: usize,
    /// Strictly decreasing diffusion timesteps.
    #[serde(default = "default_timesteps")]
    pub timesteps: Vec<u32>,
    #[serde(default)]
    pub seed: u64,
    pub blocks: Vec<BlockSpec>,
}

/// 50 evenly spaced steps out of 1000, descending.
pub fn default_timesteps() -> Vec<u32> {
    (0..50u32).rev().map(|i| i * 20 + 1).collect()
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_frames == 0 {
            return bad("total_frames must be >= 1".into());
        }
        if self.reference_interval == 0 || self.reference_interval > self.total_frames {
            return bad(format!(
                "reference_interval must lie in [1, {}], got {}",
                self.total_frames, self.reference_interval
            ));
        }
        if self.full_frame_interval == 0 {
            return bad("full_frame_interval must be >= 1".into());
        }
        if self.timesteps.is_empty() {
            return bad("timesteps must be non-empty".into());
        }
        if self.timesteps.windows(2).any(|w| w[0] <= w[1]) {
            return bad("timesteps must be strictly decreasing".into());
        }
        if self.blocks.is_empty() {
            return bad("at least one attention block is required".into());
        }
        for (j, b) in self.blocks.iter().enumerate() {
            if b.resolution == 0 || b.channels == 0 {
                return bad(format!("block {j} needs positive resolution and channels"));
            }
        }
        Ok(())
    }

    pub fn resolutions(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.resolution).collect()
    }
}

/// Which KV the joint pass extends attention over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KvMode {
    /// Motion-gathered sparse KV.
    #[default]
    Sparse,
    /// Every token of every reference frame.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum InputSource {
    /// Directory of PNG frames.
    Frames { dir: PathBuf },
    /// Generated scene; it renders `total_frames` frames.
    Synthetic { scene: SceneSpec },
}

/// Everything `run_pipeline` needs, as read from a JSON config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    #[serde(flatten)]
    pub schedule: ScheduleConfig,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub flow: FlowSource,
    #[serde(default)]
    pub masks: MaskOptions,
    #[serde(default)]
    pub kv_mode: KvMode,
    pub input: InputSource,
    /// Worker threads; `None` uses available parallelism.
    #[serde(default)]
    pub workers: Option<usize>,
}

fn default_heads() -> usize {
    1
}

impl EditConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        if self.heads == 0 {
            return Err(Error::Config("heads must be >= 1".into()));
        }
        for (j, b) in self.schedule.blocks.iter().enumerate() {
            if b.channels % self.heads != 0 {
                return Err(Error::Config(format!(
                    "block {j}: {} channels not divisible into {} heads",
                    b.channels, self.heads
                )));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Checks block grids fit frames of the given size.
    pub fn validate_frame_size(&self, width: usize, height: usize) -> Result<()> {
        for (j, b) in self.schedule.blocks.iter().enumerate() {
            let (rows, cols) = grid_dims(b.resolution, width, height);
            if rows > height || cols > width {
                return Err(Error::Config(format!(
                    "block {j} resolution {} exceeds frame {width}x{height}",
                    b.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn worker_count(&self) -> usize {
        self.workers
            .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schedule() -> ScheduleConfig {
        ScheduleConfig {
            total_frames: 10,
            reference_interval: 3,
            full_frame_interval: 4,
            timesteps: vec![41, 21, 1],
            seed: 0,
            blocks: vec![BlockSpec { resolution: 8, channels: 8 }],
        }
    }

    #[test]
    fn default_schedule_has_fifty_descending_steps() {
        let t = default_timesteps();
        assert_eq!(t.len(), 50);
        assert_eq!((t[0], t[49]), (981, 1));
    }

    #[test]
    fn schedule_validation() {
        schedule().validate().unwrap();
        let mut s = schedule();
        s.reference_interval = 11;
        assert!(s.validate().is_err());
        let mut s = schedule();
        s.timesteps = vec![1, 21];
        assert!(s.validate().is_err());
        let mut s = schedule();
        s.timesteps.clear();
        assert!(s.validate().is_err());
        let mut s = schedule();
        s.full_frame_interval = 0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn config_parses_with_defaults() {
        let json = r#"{
            "total_frames": 4, "reference_interval": 4, "full_frame_interval": 8,
            "timesteps": [21, 1], "seed": 7,
            "blocks": [{"resolution": 16, "channels": 8}],
            "input": {"kind": "synthetic", "scene": {"width": 32, "height": 32, "frames": 4, "background_seed": 1}}
        }"#;
        let cfg = EditConfig::from_json(json).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.heads, 1);
        assert_eq!(cfg.flow, FlowSource::default());
        assert!(EditConfig::from_json("{\"total_frames\": 1}").is_err());
    }

    #[test]
    fn heads_must_divide_channels() {
        let cfg = EditConfig {
            schedule: schedule(),
            heads: 3,
            flow: FlowSource::default(),
            masks: MaskOptions::default(),
            kv_mode: KvMode::Sparse,
            input: InputSource::Synthetic { scene: SceneSpec::still(16, 16, 10, 0) },
            workers: None,
        };
        assert!(cfg.validate().is_err());
    }
}
