//! In-memory raster types. Colors are linear RGB in `[0, 1]` stored as `f64`.

use crate::error::{Error, Result};
use crate::prelude::*;

/// Rec.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[inline]
pub fn luma(rgb: [f64; 3]) -> f64 {
    LUMA_WEIGHTS[0] * rgb[0] + LUMA_WEIGHTS[1] * rgb[1] + LUMA_WEIGHTS[2] * rgb[2]
}

/// Rec.601 full-range YCbCr: returns `(Y, [Cb, Cr])` with chroma in `[-0.5, 0.5]`.
#[inline]
pub fn rgb_to_ycbcr(rgb: [f64; 3]) -> (f64, [f64; 2]) {
    let y = luma(rgb);
    let cb = (rgb[2] - y) * (0.5 / (1.0 - LUMA_WEIGHTS[2]));
    let cr = (rgb[0] - y) * (0.5 / (1.0 - LUMA_WEIGHTS[0]));
    (y, [cb, cr])
}

#[inline]
pub fn ycbcr_to_rgb(y: f64, chroma: [f64; 2]) -> [f64; 3] {
    let [cb, cr] = chroma;
    let r = y + cr * (2.0 * (1.0 - LUMA_WEIGHTS[0]));
    let b = y + cb * (2.0 * (1.0 - LUMA_WEIGHTS[2]));
    let g = (y - LUMA_WEIGHTS[0] * r - LUMA_WEIGHTS[2] * b) / LUMA_WEIGHTS[1];
    [r, g, b]
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, fill: [f64; 3]) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_pixels(width: usize, height: usize, data: Vec<[f64; 3]>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid(format!(
                "{} pixels for a {width}x{height} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }
    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.data
    }
    pub fn pixels_mut(&mut self) -> &mut [[f64; 3]] {
        &mut self.data
    }

    pub fn ensure_same_dims(&self, other: (usize, usize)) -> Result<()> {
        if self.dims() != other {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other,
            });
        }
        Ok(())
    }

    pub fn luma_plane(&self) -> Vec<f64> {
        self.data.iter().map(|&p| luma(p)).collect()
    }

    pub fn map(&self, mut f: impl FnMut([f64; 3]) -> [f64; 3]) -> RgbImage {
        RgbImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Copies `self` where `mask` is set and zero elsewhere.
    pub fn masked(&self, mask: &Mask) -> Result<RgbImage> {
        self.ensure_same_dims(mask.dims())?;
        Ok(RgbImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .zip(mask.data.iter())
                .map(|(&p, &m)| if m { p } else { [0.0; 3] })
                .collect(),
        })
    }

    /// Sub-image `[x0, x0+w) × [y0, y0+h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| self.get(x0 + x, y0 + y))
    }

    pub fn clamp01(&self) -> RgbImage {
        self.map(|p| [p[0].clamp(0.0, 1.0), p[1].clamp(0.0, 1.0), p[2].clamp(0.0, 1.0)])
    }

    /// Bit pattern of every sample, for byte-level comparisons.
    pub fn bits(&self) -> impl Iterator<Item = u64> + '_ {
        self.data.iter().flat_map(|p| p.iter().map(|c| c.to_bits()))
    }

    /// FNV-1a digest of the sample bits.
    pub fn digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for word in [self.width as u64, self.height as u64].into_iter().chain(self.bits()) {
            for b in word.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Binary per-pixel map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fill: bool) -> Self {
        Self {
            width,
            height,
            data: vec![fill; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_bits(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("mask length does not match its dimensions"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }
    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }
    pub fn bits(&self) -> &[bool] {
        &self.data
    }
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        }
    }

    pub fn invert(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|b| !b).collect(),
        }
    }

    /// Inclusive bounding box `(x0, y0, x1, y1)` of the set pixels.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    bb = Some(match bb {
                        None => (x, y, x, y),
                        Some((x0, y0, x1, y1)) => (x0.min(x), y0.min(y), x1.max(x), y1.max(y)),
                    });
                }
            }
        }
        bb
    }

    /// Euclidean-disc dilation.
    pub fn dilate(&self, radius: usize) -> Mask {
        self.morph(radius, true)
    }

    /// Euclidean-disc erosion; pixels outside the image count as unset.
    pub fn erode(&self, radius: usize) -> Mask {
        self.morph(radius, false)
    }

    fn morph(&self, radius: usize, dilate: bool) -> Mask {
        if radius == 0 {
            return self.clone();
        }
        let r = radius as isize;
        let offsets: Vec<(isize, isize)> = (-r..=r)
            .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
            .filter(|(dx, dy)| dx * dx + dy * dy <= r * r)
            .collect();
        Mask::from_fn(self.width, self.height, |x, y| {
            let hit = |dx: isize, dy: isize| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0
                    && ny >= 0
                    && (nx as usize) < self.width
                    && (ny as usize) < self.height
                    && self.get(nx as usize, ny as usize)
            };
            if dilate {
                offsets.iter().any(|&(dx, dy)| hit(dx, dy))
            } else {
                offsets.iter().all(|&(dx, dy)| hit(dx, dy))
            }
        })
    }
}

/// Per-pixel region labels (human parsing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::invalid("label map length does not match its dimensions"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
    pub fn labels(&self) -> &[u8] {
        &self.data
    }
    pub fn mask_of(&self, labels: &[u8]) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|l| labels.contains(l)).collect(),
        }
    }
}

/// Area-average resize of a scalar plane to `out_w × out_h`; each output
/// cell integrates the exact fractional footprint of the input pixels.
pub fn resize_area(plane: &[f64], width: usize, height: usize, out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = width as f64 / out_w as f64;
    let sy = height as f64 / out_h as f64;
    let mut out = vec![0.0; out_w * out_h];
    for oy in 0..out_h {
        let (y0, y1) = (oy as f64 * sy, (oy + 1) as f64 * sy);
        for ox in 0..out_w {
            let (x0, x1) = (ox as f64 * sx, (ox + 1) as f64 * sx);
            let mut acc = 0.0;
            let mut y = crate::math::floor(y0) as usize;
            while (y as f64) < y1 && y < height {
                let wy = (y1.min(y as f64 + 1.0) - y0.max(y as f64)).max(0.0);
                let mut x = crate::math::floor(x0) as usize;
                while (x as f64) < x1 && x < width {
                    let wx = (x1.min(x as f64 + 1.0) - x0.max(x as f64)).max(0.0);
                    acc += wx * wy * plane[y * width + x];
                    x += 1;
                }
                y += 1;
            }
            out[oy * out_w + ox] = acc / (sx * sy);
        }
    }
    out
}
