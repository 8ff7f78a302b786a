use rand::Rng;

use crate::error::{invalid, Result};
use crate::numerics::{Real, Tensor};

/// Which views augmentation multiplicity draws per example.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentationPolicy {
    /// Horizontal flip with probability 1/2.
    pub flip: bool,
    /// Shift-crop amplitude in pixels (0 disables).
    pub max_shift: usize,
    /// Draw a fresh timestep for every view rather than one per example.
    pub resample_timesteps: bool,
}

impl AugmentationPolicy {
    pub const NONE: Self = Self {
        flip: false,
        max_shift: 0,
        resample_timesteps: false,
    };

    pub fn timesteps_only() -> Self {
        Self {
            resample_timesteps: true,
            ..Self::NONE
        }
    }

    pub fn timesteps_and_flip() -> Self {
        Self {
            flip: true,
            resample_timesteps: true,
            max_shift: 0,
        }
    }

    pub fn any_active(&self) -> bool {
        self.flip || self.max_shift > 0 || self.resample_timesteps
    }

    /// Multiplicity `k > 1` is meaningless with every dimension disabled.
    pub fn validate(&self, k: usize) -> Result<()> {
        if k == 0 {
            return Err(invalid("augmentation multiplicity must be at least 1"));
        }
        if k > 1 && !self.any_active() {
            return Err(invalid(format!(
                "augmentation multiplicity {k} requires an active augmentation"
            )));
        }
        Ok(())
    }
}

/// Flip then shift an `[H, W, C]` image. Vacated pixels are zero.
pub fn augment_with<T: Real>(image: &Tensor<T>, flip: bool, dy: isize, dx: isize) -> Tensor<T> {
    let s = image.shape();
    let (h, w, c) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        let Some(sy) = y.checked_add_signed(-dy).filter(|&v| v < h) else {
            continue;
        };
        for x in 0..w {
            let Some(sx) = x.checked_add_signed(-dx).filter(|&v| v < w) else {
                continue;
            };
            let fx = if flip { w - 1 - sx } else { sx };
            let (d, o) = ((y * w + x) * c, (sy * w + fx) * c);
            out[d..d + c].copy_from_slice(&src[o..o + c]);
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Random flip and shift-crop per `policy`.
pub fn augment<T: Real, R: Rng + ?Sized>(
    image: &Tensor<T>,
    policy: &AugmentationPolicy,
    rng: &mut R,
) -> Tensor<T> {
    let flip = policy.flip && rng.random_bool(0.5);
    let (dy, dx) = if policy.max_shift > 0 {
        let s = policy.max_shift as i64;
        (
            rng.random_range(-s..=s) as isize,
            rng.random_range(-s..=s) as isize,
        )
    } else {
        (0, 0)
    };
    if !flip && dy == 0 && dx == 0 {
        return image.clone();
    }
    augment_with(image, flip, dy, dx)
}
