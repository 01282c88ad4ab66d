//! Stage 3: null-space restoration.
//!
//! With a linear degradation `A` and pseudo-inverse `A†`, the estimate
//! `x̂ = A†y + (I − A†A)·x̄` takes its range-space part from the observation
//! and its null-space part from a prior guess `x̄`, so `A x̂ = y` exactly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::math;
use crate::prelude::*;

/// A linear degradation with closed-form pseudo-inverse.
#[derive(Debug, Clone, PartialEq)]
pub enum DegradationOp {
    Identity,
    /// Keeps the pixels where the mask is set.
    Mask(Mask),
    /// Average-pools `factor × factor` blocks.
    Downsample { factor: usize },
}

impl DegradationOp {
    fn check_input(&self, dims: (usize, usize)) -> Result<()> {
        match self {
            DegradationOp::Identity => Ok(()),
            DegradationOp::Mask(m) => {
                if m.dims() != dims {
                    return Err(Error::DimensionMismatch {
                        expected: m.dims(),
                        actual: dims,
                    });
                }
                Ok(())
            }
            DegradationOp::Downsample { factor } => {
                if *factor == 0 || dims.0 % factor != 0 || dims.1 % factor != 0 {
                    return Err(Error::invalid(format!(
                        "{}x{} is not divisible by downsample factor {factor}",
                        dims.0, dims.1
                    )));
                }
                Ok(())
            }
        }
    }

    /// Shape of `A x` for an input of `dims`.
    pub fn output_dims(&self, dims: (usize, usize)) -> Result<(usize, usize)> {
        self.check_input(dims)?;
        Ok(match self {
            DegradationOp::Downsample { factor } => (dims.0 / factor, dims.1 / factor),
            _ => dims,
        })
    }

    /// `A x`.
    pub fn apply(&self, x: &RgbImage) -> Result<RgbImage> {
        self.check_input(x.dims())?;
        Ok(match self {
            DegradationOp::Identity => x.clone(),
            DegradationOp::Mask(m) => x.masked(m)?,
            DegradationOp::Downsample { factor } => {
                let s = *factor;
                let inv = 1.0 / (s * s) as f64;
                RgbImage::from_fn(x.width() / s, x.height() / s, |ox, oy| {
                    let mut acc = [0.0; 3];
                    for dy in 0..s {
                        for dx in 0..s {
                            let p = x.get(ox * s + dx, oy * s + dy);
                            for ch in 0..3 {
                                acc[ch] += p[ch];
                            }
                        }
                    }
                    [acc[0] * inv, acc[1] * inv, acc[2] * inv]
                })
            }
        })
    }

    /// `A† y`, mapping an observation back to image space.
    pub fn pseudo_inverse(&self, y: &RgbImage) -> Result<RgbImage> {
        Ok(match self {
            DegradationOp::Identity => y.clone(),
            DegradationOp::Mask(m) => {
                self.check_input(y.dims())?;
                y.masked(m)?
            }
            DegradationOp::Downsample { factor } => {
                let s = *factor;
                if s == 0 {
                    return Err(Error::invalid("downsample factor must be positive"));
                }
                RgbImage::from_fn(y.width() * s, y.height() * s, |x, yy| y.get(x / s, yy / s))
            }
        })
    }

    /// `A†A x`.
    pub fn projector(&self, x: &RgbImage) -> Result<RgbImage> {
        self.pseudo_inverse(&self.apply(x)?)
    }
}

/// A prior that proposes a clean image from a rough one.
pub trait Restorer: Send + Sync {
    fn restore(&self, x: &RgbImage) -> Result<RgbImage>;
}

/// Returns its input.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PassThrough;

impl Restorer for PassThrough {
    fn restore(&self, x: &RgbImage) -> Result<RgbImage> {
        Ok(x.clone())
    }
}

/// Iterated 3×3 bilateral filter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SmoothingPrior {
    pub iterations: usize,
    pub spatial_sigma: f64,
    pub range_sigma: f64,
}

impl Default for SmoothingPrior {
    fn default() -> Self {
        Self {
            iterations: 5,
            spatial_sigma: 1.0,
            range_sigma: 0.1,
        }
    }
}

impl Restorer for SmoothingPrior {
    fn restore(&self, x: &RgbImage) -> Result<RgbImage> {
        let (w, h) = x.dims();
        let mut cur = x.clone();
        let ks = -0.5 / (self.spatial_sigma * self.spatial_sigma);
        let kr = -0.5 / (self.range_sigma * self.range_sigma);
        for _ in 0..self.iterations {
            let src = cur.clone();
            for y in 0..h {
                for xx in 0..w {
                    let c = src.get(xx, y);
                    let mut acc = [0.0; 3];
                    let mut wsum = 0.0;
                    for dy in -1isize..=1 {
                        for dx in -1isize..=1 {
                            let nx = (xx as isize + dx).clamp(0, w as isize - 1) as usize;
                            let ny = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                            let p = src.get(nx, ny);
                            let d = [p[0] - c[0], p[1] - c[1], p[2] - c[2]];
                            let d2 = math::dot3(d, d);
                            let wt = math::exp(ks * (dx * dx + dy * dy) as f64 + kr * d2);
                            for ch in 0..3 {
                                acc[ch] += wt * p[ch];
                            }
                            wsum += wt;
                        }
                    }
                    cur.set(xx, y, [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum]);
                }
            }
        }
        Ok(cur)
    }
}

/// `x̂ = A†y + (I − A†A)·prior(A†y)`.
pub fn nullspace_restore(y: &RgbImage, op: &DegradationOp, prior: &dyn Restorer) -> Result<RgbImage> {
    let range = op.pseudo_inverse(y)?;
    let guess = prior.restore(&range)?;
    nullspace_combine(y, op, &guess)
}

/// Restores one view: the observation is `A·image` and the prior starts
/// from the full image, so a pass-through prior returns `image` unchanged.
pub fn restore_view(image: &RgbImage, op: &DegradationOp, prior: &dyn Restorer) -> Result<RgbImage> {
    let y = op.apply(image)?;
    let guess = prior.restore(image)?;
    nullspace_combine(&y, op, &guess)
}

/// `A†y + guess − A†A·guess`.
pub fn nullspace_combine(y: &RgbImage, op: &DegradationOp, guess: &RgbImage) -> Result<RgbImage> {
    let range = op.pseudo_inverse(y)?;
    guess.ensure_same_dims(range.dims())?;
    let projected = op.projector(guess)?;
    let mut out = range;
    for ((o, g), p) in out.pixels_mut().iter_mut().zip(guess.pixels()).zip(projected.pixels()) {
        for ch in 0..3 {
            o[ch] += g[ch] - p[ch];
        }
    }
    Ok(out)
}

/// Degradation used by the pipeline's restoration stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DegradationSpec {
    Identity,
    /// The view's garment mask.
    GarmentMask,
    Downsample { factor: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    PassThrough,
    Smoothing(SmoothingPrior),
}

impl PriorSpec {
    pub fn restorer(&self) -> Box<dyn Restorer> {
        match self {
            PriorSpec::PassThrough => Box::new(PassThrough),
            PriorSpec::Smoothing(s) => Box::new(*s),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestoreConfig {
    pub degradation: DegradationSpec,
    pub prior: PriorSpec,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            degradation: DegradationSpec::Identity,
            prior: PriorSpec::PassThrough,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, salt: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = ((x * 31 + y * 17 + salt * 7) % 23) as f64 / 23.0;
            [v, 1.0 - v, (v * 3.0) % 1.0]
        })
    }

    #[test]
    fn identity_returns_observation() {
        let y = img(8, 8, 1);
        assert_eq!(nullspace_restore(&y, &DegradationOp::Identity, &SmoothingPrior::default()).unwrap(), y);
    }

    #[test]
    fn mask_splits_observation_and_prior() {
        let y = img(10, 6, 2);
        let m = Mask::from_fn(10, 6, |x, _| x < 5);
        let op = DegradationOp::Mask(m.clone());
        let prior = SmoothingPrior::default();
        let yy = op.apply(&y).unwrap();
        let out = nullspace_restore(&yy, &op, &prior).unwrap();
        let guess = prior.restore(&yy).unwrap();
        for py in 0..6 {
            for px in 0..10 {
                if px < 5 {
                    assert_eq!(out.get(px, py), y.get(px, py));
                } else {
                    assert_eq!(out.get(px, py), guess.get(px, py));
                }
            }
        }
    }

    #[test]
    fn downsample_is_data_consistent() {
        let x = img(12, 8, 3);
        let op = DegradationOp::Downsample { factor: 2 };
        let y = op.apply(&x).unwrap();
        let out = nullspace_restore(&y, &op, &SmoothingPrior::default()).unwrap();
        let back = op.apply(&out).unwrap();
        for (a, b) in back.pixels().iter().zip(y.pixels()) {
            for ch in 0..3 {
                assert!((a[ch] - b[ch]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pass_through_view_restore_is_identity() {
        let x = img(8, 6, 4);
        let m = Mask::from_fn(8, 6, |x, y| (x + y) % 3 == 0);
        for op in [DegradationOp::Identity, DegradationOp::Mask(m), DegradationOp::Downsample { factor: 2 }] {
            let out = restore_view(&x, &op, &PassThrough).unwrap();
            for (a, b) in out.pixels().iter().zip(x.pixels()) {
                for ch in 0..3 {
                    assert!((a[ch] - b[ch]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_downsample_is_rejected() {
        assert!(DegradationOp::Downsample { factor: 2 }.apply(&img(5, 4, 0)).is_err());
    }
}
