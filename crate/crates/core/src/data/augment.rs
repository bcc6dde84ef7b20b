//! Training-time augmentation: horizontal flips and random crops.
//!
//! The operations themselves are pure: the flip takes its uniform draw and
//! the crop takes its offsets as arguments. [`AugmentationSampler`] wraps a
//! seeded generator and supplies those values inside the training loop, so
//! a run is reproducible from its seed alone.

use ndarray::{Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;
use crate::imageops::Image;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub flip_probability: f64,
    pub crop_fraction: f64,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            flip_probability: 0.5,
            crop_fraction: 0.9,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(DataError::InvalidConfig(
                "flip_probability must be in [0, 1]".into(),
            ));
        }
        if !(self.crop_fraction > 0.0 && self.crop_fraction <= 1.0) {
            return Err(DataError::InvalidConfig(
                "crop_fraction must be in (0, 1]".into(),
            ));
        }
        Ok(())
    }
}

/// Crop side length for one input dimension: `round(fraction * side)`,
/// clamped to at least one pixel.
pub(crate) fn crop_side(fraction: f64, side: usize) -> usize {
    ((fraction * side as f64).round() as usize).clamp(1, side)
}

/// Reverse the column order when `draw < flip_probability`, otherwise
/// return the image unchanged.
pub fn augment_flip(
    image: &Image,
    config: &AugmentationConfig,
    draw: f64,
) -> Result<Image, DataError> {
    if image.is_empty() {
        return Err(DataError::EmptyImage);
    }
    if draw < config.flip_probability {
        let mut out = image.clone();
        out.invert_axis(Axis(1));
        Ok(out)
    } else {
        Ok(image.clone())
    }
}

/// Copy the crop window at `offsets` with side lengths
/// `round(crop_fraction * side)`. The window must lie fully inside the
/// image.
pub fn augment_crop(
    image: &Image,
    config: &AugmentationConfig,
    offsets: (usize, usize),
) -> Result<Image, DataError> {
    if image.is_empty() {
        return Err(DataError::EmptyImage);
    }
    let (h, w, c) = crate::imageops::dims(image);
    let ch = crop_side(config.crop_fraction, h);
    let cw = crop_side(config.crop_fraction, w);
    let (r0, c0) = offsets;
    if r0 + ch > h || c0 + cw > w {
        return Err(DataError::CropOutOfBounds);
    }
    let mut out = Array3::zeros((ch, cw, c));
    for r in 0..ch {
        for col in 0..cw {
            for chn in 0..c {
                out[(r, col, chn)] = image[(r0 + r, c0 + col, chn)];
            }
        }
    }
    Ok(out)
}

/// Seeded source of flip draws and crop offsets for the training loop.
#[derive(Debug, Clone)]
pub struct AugmentationSampler {
    rng: ChaCha8Rng,
}

impl AugmentationSampler {
    pub fn new(seed: u64) -> Self {
        AugmentationSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// A uniform draw in `[0, 1)` for the flip decision.
    pub fn flip_draw(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform in-bounds offsets for a crop of the configured fraction.
    pub fn crop_offsets(&mut self, config: &AugmentationConfig, h: usize, w: usize) -> (usize, usize) {
        let ch = crop_side(config.crop_fraction, h);
        let cw = crop_side(config.crop_fraction, w);
        let r0 = if h > ch { self.rng.gen_range(0..=h - ch) } else { 0 };
        let c0 = if w > cw { self.rng.gen_range(0..=w - cw) } else { 0 };
        (r0, c0)
    }

    /// Bernoulli draws used for dropout masks.
    pub fn bernoulli(&mut self, keep_probability: f64) -> bool {
        self.rng.gen::<f64>() < keep_probability
    }
}
