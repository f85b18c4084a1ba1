//! Seeded synthetic videos with known motion: a static noise background plus
//! rigidly moving textured rectangles and fixed windows whose texture
//! scrolls. Used as ground truth for flow and mask checks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::media::Frame;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SceneObject {
    /// Textured rectangle whose top-left corner moves by `(vx, vy)` per frame.
    Rect { x: i64, y: i64, w: usize, h: usize, vx: i64, vy: i64, texture_seed: u64 },
    /// Fixed window whose texture translates by `(vx, vy)` per frame,
    /// wrapping around inside the window.
    Scroll { x: usize, y: usize, w: usize, h: usize, vx: i64, vy: i64, texture_seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub background_seed: u64,
    #[serde(default)]
    pub objects: Vec<SceneObject>,
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn union_contains(rects: &[PixelRect], x: usize, y: usize) -> bool {
        rects.iter().any(|r| r.contains(x, y))
    }
}

struct Texture {
    w: usize,
    h: usize,
    px: Vec<[u8; 3]>,
}

impl Texture {
    fn new(w: usize, h: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..w * h).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
        Self { w, h, px }
    }

    fn at(&self, x: usize, y: usize) -> [u8; 3] {
        self.px[y * self.w + x]
    }
}

impl SceneSpec {
    /// Noise background with no motion.
    pub fn still(width: usize, height: usize, frames: usize, seed: u64) -> Self {
        Self { width, height, frames, background_seed: seed, objects: Vec::new() }
    }

    /// Left half scrolls horizontally by `speed` px/frame; right half static.
    pub fn half_moving(width: usize, height: usize, frames: usize, speed: i64, seed: u64) -> Self {
        Self {
            width,
            height,
            frames,
            background_seed: seed,
            objects: vec![SceneObject::Scroll {
                x: 0,
                y: 0,
                w: width / 2,
                h: height,
                vx: speed,
                vy: 0,
                texture_seed: seed.wrapping_add(1),
            }],
        }
    }

    /// One textured rectangle translating rigidly over the background.
    pub fn moving_rect(
        width: usize,
        height: usize,
        frames: usize,
        rect: (i64, i64, usize, usize),
        velocity: (i64, i64),
        seed: u64,
    ) -> Self {
        Self {
            width,
            height,
            frames,
            background_seed: seed,
            objects: vec![SceneObject::Rect {
                x: rect.0,
                y: rect.1,
                w: rect.2,
                h: rect.3,
                vx: velocity.0,
                vy: velocity.1,
                texture_seed: seed.wrapping_add(1),
            }],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 {
            return Err(Error::Config(format!(
                "scene must have positive size and frame count, got {}x{}x{}",
                self.width, self.height, self.frames
            )));
        }
        for obj in &self.objects {
            match *obj {
                SceneObject::Rect { w, h, .. } if w == 0 || h == 0 => {
                    return Err(Error::Config("scene rectangle must be non-empty".into()))
                }
                SceneObject::Scroll { x, y, w, h, .. }
                    if w == 0 || h == 0 || x + w > self.width || y + h > self.height =>
                {
                    return Err(Error::Config("scroll window must be non-empty and inside the frame".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Renders every frame.
    pub fn render(&self) -> Result<Vec<Frame>> {
        self.validate()?;
        let background = Texture::new(self.width, self.height, self.background_seed);
        let textures: Vec<Texture> = self
            .objects
            .iter()
            .map(|o| match *o {
                SceneObject::Rect { w, h, texture_seed, .. } | SceneObject::Scroll { w, h, texture_seed, .. } => {
                    Texture::new(w, h, texture_seed)
                }
            })
            .collect();
        (0..self.frames)
            .map(|n| {
                let mut frame = Frame::new(self.width, self.height, background.px.clone())?;
                for (obj, tex) in self.objects.iter().zip(&textures) {
                    self.paint(&mut frame, obj, tex, n as i64);
                }
                Ok(frame)
            })
            .collect()
    }

    fn paint(&self, frame: &mut Frame, obj: &SceneObject, tex: &Texture, n: i64) {
        match *obj {
            SceneObject::Rect { x, y, w, h, vx, vy, .. } => {
                let (ox, oy) = (x + n * vx, y + n * vy);
                for ty in 0..h {
                    for tx in 0..w {
                        let (px, py) = (ox + tx as i64, oy + ty as i64);
                        if px >= 0 && py >= 0 && (px as usize) < self.width && (py as usize) < self.height {
                            frame.set(px as usize, py as usize, tex.at(tx, ty));
                        }
                    }
                }
            }
            SceneObject::Scroll { x, y, w, h, vx, vy, .. } => {
                for py in 0..h {
                    for px in 0..w {
                        let tx = (px as i64 - n * vx).rem_euclid(tex.w as i64) as usize;
                        let ty = (py as i64 - n * vy).rem_euclid(tex.h as i64) as usize;
                        frame.set(x + px, y + py, tex.at(tx, ty));
                    }
                }
            }
        }
    }

    /// Regions in motion at frame `n` (0-based), clipped to the frame.
    pub fn moving_regions(&self, n: usize) -> Vec<PixelRect> {
        let clip = |x0: i64, y0: i64, x1: i64, y1: i64| PixelRect {
            x0: x0.clamp(0, self.width as i64) as usize,
            y0: y0.clamp(0, self.height as i64) as usize,
            x1: x1.clamp(0, self.width as i64) as usize,
            y1: y1.clamp(0, self.height as i64) as usize,
        };
        self.objects
            .iter()
            .filter_map(|o| match *o {
                SceneObject::Rect { x, y, w, h, vx, vy, .. } if vx != 0 || vy != 0 => {
                    let (ox, oy) = (x + n as i64 * vx, y + n as i64 * vy);
                    Some(clip(ox, oy, ox + w as i64, oy + h as i64))
                }
                SceneObject::Scroll { x, y, w, h, vx, vy, .. } if vx != 0 || vy != 0 => {
                    Some(clip(x as i64, y as i64, (x + w) as i64, (y + h) as i64))
                }
                _ => None,
            })
            .collect()
    }
}
