//! Synthetic inversion problems on the toy generator.
//!
//! A clean target is rendered from a sampled latent, so it is reachable by
//! construction. Pasting a square of uniform noise over part of it creates a
//! region no latent can reproduce.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::generator::{sample_z, GeneratorState};
use crate::latent::LatentCode;
use crate::tensor::{DomainMask, Image};

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub y: usize,
    pub x: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        (self.y..self.y + self.height).contains(&y) && (self.x..self.x + self.width).contains(&x)
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    /// 1 outside the rectangle, 0 inside.
    pub fn as_out_mask(&self, height: usize, width: usize) -> DomainMask {
        DomainMask::from_fn(height, width, |y, x| !self.contains(y, x))
    }
}

/// W code of a standard-normal Z sample.
pub fn sample_w(state: &GeneratorState<f32>, seed: u64) -> Result<LatentCode<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = sample_z::<f32>(&mut rng, state.d_latent());
    state.to_w(&LatentCode::z(z))
}

/// Square of side `round(sqrt(fraction · H · W))` at a seeded position,
/// filled with uniform noise in `[-1, 1]`.
pub fn paste_noise_patch(image: &Image<f32>, fraction: f64, seed: u64) -> (Image<f32>, Rect) {
    let (h, w) = (image.height(), image.width());
    let side = ((fraction * (h * w) as f64).sqrt().round() as usize).clamp(1, h.min(w));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rect = Rect {
        y: rng.gen_range(0..=h - side),
        x: rng.gen_range(0..=w - side),
        height: side,
        width: side,
    };
    let mut out = image.clone();
    for c in 0..3 {
        for y in rect.y..rect.y + side {
            for x in rect.x..rect.x + side {
                out.set(c, y, x, rng.gen_range(-1.0f32..=1.0));
            }
        }
    }
    (out, rect)
}

/// A reachable target with a pasted noise square.
#[derive(Clone, Debug)]
pub struct PatchedTarget {
    pub w_true: LatentCode<f32>,
    pub clean: Image<f32>,
    pub target: Image<f32>,
    pub patch: Rect,
}

/// Renders `sample_w(seed)` and pastes a noise square covering `fraction` of the image.
pub fn patched_target(state: &GeneratorState<f32>, seed: u64, fraction: f64) -> Result<PatchedTarget> {
    let w_true = sample_w(state, seed)?;
    let clean = state.synthesize(&w_true)?;
    let (target, patch) = paste_noise_patch(&clean, fraction, seed ^ 0x9e37_79b9_7f4a_7c15);
    Ok(PatchedTarget {
        w_true,
        clean,
        target,
        patch,
    })
}
