//! Synthetic planted-object images.
//!
//! Each image is a flat background with one high-contrast rectangle aligned
//! to the patch grid, placed uniformly at random. Because every patch is
//! either fully background or fully object, the ground-truth object token set
//! is exact, which makes these images the oracle for salience-targeting and
//! adaptive-ratio behavior.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::numerics::Rng;

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub width: usize,
    pub height: usize,
    pub patch_side: usize,
    /// Object extent in patches (rows, cols).
    pub object_rows: usize,
    pub object_cols: usize,
    pub background: f32,
    pub object_value: f32,
    /// Per-pixel uniform jitter amplitude; 0 keeps patches perfectly flat.
    pub texture: f32,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            width: 32,
            height: 32,
            patch_side: 8,
            object_rows: 2,
            object_cols: 2,
            background: 0.2,
            object_value: 0.9,
            texture: 0.0,
        }
    }
}

impl SyntheticConfig {
    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_side, self.width / self.patch_side)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0
            || !self.width.is_multiple_of(self.patch_side)
            || !self.height.is_multiple_of(self.patch_side)
        {
            return Err(Error::Config(format!(
                "patch side {} must divide image {}x{}",
                self.patch_side, self.width, self.height
            )));
        }
        let (gr, gc) = self.grid();
        if self.object_rows == 0
            || self.object_cols == 0
            || self.object_rows > gr
            || self.object_cols > gc
        {
            return Err(Error::Config(format!(
                "object {}x{} patches does not fit the {gr}x{gc} grid",
                self.object_rows, self.object_cols
            )));
        }
        for (name, v) in [
            ("background", self.background),
            ("object-value", self.object_value),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} {v} outside [0,1]")));
            }
        }
        if self.texture < 0.0 {
            return Err(Error::Config(format!(
                "texture {} must be >= 0",
                self.texture
            )));
        }
        Ok(())
    }
}

/// A generated image plus the token indices its object occupies.
#[derive(Debug, Clone)]
pub struct PlantedImage {
    pub image: Image,
    pub object_tokens: Vec<usize>,
}

/// Generates `count` images with independently drawn object positions.
pub fn generate(cfg: &SyntheticConfig, count: usize, rng: &mut Rng) -> Result<Vec<PlantedImage>> {
    cfg.validate()?;
    let (gr, gc) = cfg.grid();
    let p = cfg.patch_side;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let row0 = (rng.next_u64() % (gr - cfg.object_rows + 1) as u64) as usize;
        let col0 = (rng.next_u64() % (gc - cfg.object_cols + 1) as u64) as usize;
        let mut pixels = vec![cfg.background; cfg.width * cfg.height];
        for gy in row0..row0 + cfg.object_rows {
            for gx in col0..col0 + cfg.object_cols {
                for py in 0..p {
                    for px in 0..p {
                        pixels[(gy * p + py) * cfg.width + gx * p + px] = cfg.object_value;
                    }
                }
            }
        }
        if cfg.texture > 0.0 {
            for v in &mut pixels {
                *v = (*v + rng.next_f32_in(-cfg.texture, cfg.texture)).clamp(0.0, 1.0);
            }
        }
        let mut object_tokens = Vec::with_capacity(cfg.object_rows * cfg.object_cols);
        for gy in row0..row0 + cfg.object_rows {
            for gx in col0..col0 + cfg.object_cols {
                object_tokens.push(gy * gc + gx);
            }
        }
        out.push(PlantedImage {
            image: Image::new(cfg.width, cfg.height, 1, pixels)?,
            object_tokens,
        });
    }
    Ok(out)
}
