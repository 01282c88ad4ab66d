//! Stage 1: keep the original face by compositing it over the edited view.

use crate::dataset::ViewDataset;
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::math;
use crate::prelude::*;

pub const DEFAULT_HULL_DILATION: usize = 4;
pub const DEFAULT_FEATHER: usize = 6;

/// Facial keypoints of one view and the region they enclose.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceNet {
    keypoints: Vec<[f64; 2]>,
    view_index: u32,
    hull_mask: Mask,
    feather: usize,
}

impl FaceNet {
    /// Fills the convex hull of `keypoints` and dilates it by `dilation`.
    pub fn new(
        keypoints: Vec<[f64; 2]>,
        view_index: u32,
        dims: (usize, usize),
        dilation: usize,
        feather: usize,
    ) -> Result<Self> {
        if keypoints.len() < 3 {
            return Err(Error::invalid(format!(
                "a face hull needs at least 3 keypoints, got {}",
                keypoints.len()
            )));
        }
        if keypoints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite face keypoint"));
        }
        let hull = convex_hull(&keypoints);
        let (w, h) = dims;
        let mut mask = Mask::from_fn(w, h, |x, y| inside_convex(&hull, [x as f64 + 0.5, y as f64 + 0.5]));
        for k in &keypoints {
            let (x, y) = (math::floor(k[0]), math::floor(k[1]));
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                mask.set(x as usize, y as usize, true);
            }
        }
        Ok(Self {
            keypoints,
            view_index,
            hull_mask: mask.dilate(dilation),
            feather,
        })
    }

    pub fn keypoints(&self) -> &[[f64; 2]] {
        &self.keypoints
    }

    pub fn view_index(&self) -> u32 {
        self.view_index
    }

    pub fn hull_mask(&self) -> &Mask {
        &self.hull_mask
    }

    pub fn feather(&self) -> usize {
        self.feather
    }

    /// Per-pixel weight of the original image: 1 on the hull, falling
    /// linearly to 0 at `feather` pixels away.
    pub fn blend_weights(&self) -> Vec<f64> {
        let (w, h) = self.hull_mask.dims();
        let f = self.feather as isize;
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                if self.hull_mask.get(x, y) {
                    out[y * w + x] = 1.0;
                    continue;
                }
                if f == 0 {
                    continue;
                }
                let mut best = f64::INFINITY;
                for dy in -f..=f {
                    for dx in -f..=f {
                        let (nx, ny) = (x as isize + dx, y as isize + dy);
                        if nx < 0 || ny < 0 || nx as usize >= w || ny as usize >= h {
                            continue;
                        }
                        if self.hull_mask.get(nx as usize, ny as usize) {
                            best = best.min(math::sqrt((dx * dx + dy * dy) as f64));
                        }
                    }
                }
                if best < self.feather as f64 {
                    out[y * w + x] = 1.0 - best / self.feather as f64;
                }
            }
        }
        out
    }
}

/// Convex hull, counter-clockwise in image coordinates (monotone chain).
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0]);
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    if hull.len() < 3 {
        return false;
    }
    (0..hull.len()).all(|i| {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0
    })
}

/// Source of facial keypoints for a view.
pub trait FaceDetector: Send + Sync {
    fn detect(&self, view_index: u32, image: &RgbImage) -> Result<Option<Vec<[f64; 2]>>>;
}

/// Returns keypoints supplied with the dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedFaceDetector {
    keypoints: BTreeMap<u32, Vec<[f64; 2]>>,
}

impl AnnotatedFaceDetector {
    pub fn from_dataset(dataset: &ViewDataset) -> Self {
        let keypoints = dataset
            .records()
            .iter()
            .filter_map(|r| r.annotations.face_keypoints.clone().map(|k| (r.view_index(), k)))
            .collect();
        Self { keypoints }
    }
}

impl FaceDetector for AnnotatedFaceDetector {
    fn detect(&self, view_index: u32, _image: &RgbImage) -> Result<Option<Vec<[f64; 2]>>> {
        Ok(self.keypoints.get(&view_index).cloned())
    }
}

/// Finds a face by color: a skin-colored region with two dark eye dots.
///
/// Keypoints are the two eye centroids (left to right) followed by the
/// convex hull of the skin pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct MockFaceDetector {
    pub skin: [f64; 3],
    pub eye: [f64; 3],
    pub skin_tolerance: f64,
    pub min_skin_pixels: usize,
}

impl Default for MockFaceDetector {
    fn default() -> Self {
        Self {
            skin: crate::synth::SKIN_COLOR,
            eye: crate::synth::EYE_COLOR,
            skin_tolerance: 0.12,
            min_skin_pixels: 12,
        }
    }
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    math::sqrt((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1]) + (a[2] - b[2]) * (a[2] - b[2]))
}

impl MockFaceDetector {
    /// Position of a color along the skin→eye segment and its distance from
    /// the segment's line.
    fn eye_weight(&self, p: [f64; 3]) -> (f64, f64) {
        let d = [self.eye[0] - self.skin[0], self.eye[1] - self.skin[1], self.eye[2] - self.skin[2]];
        let v = [p[0] - self.skin[0], p[1] - self.skin[1], p[2] - self.skin[2]];
        let t = math::dot3(v, d) / math::dot3(d, d);
        let r = [v[0] - t * d[0], v[1] - t * d[1], v[2] - t * d[2]];
        (t, math::norm3(r))
    }
}

impl FaceDetector for MockFaceDetector {
    fn detect(&self, _view_index: u32, image: &RgbImage) -> Result<Option<Vec<[f64; 2]>>> {
        let (w, h) = image.dims();
        let skin: Vec<[f64; 2]> = (0..w * h)
            .filter(|&i| dist(image.pixels()[i], self.skin) < self.skin_tolerance)
            .map(|i| [(i % w) as f64 + 0.5, (i / w) as f64 + 0.5])
            .collect();
        if skin.len() < self.min_skin_pixels {
            return Ok(None);
        }
        let hull = convex_hull(&skin);
        if hull.len() < 3 {
            return Ok(None);
        }
        // Eye candidates: inside the skin hull and on the skin→eye color line.
        let mut weight = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let c = [x as f64 + 0.5, y as f64 + 0.5];
                if !inside_convex(&hull, c) {
                    continue;
                }
                let (t, r) = self.eye_weight(image.get(x, y));
                if t > 0.15 && r < 0.15 {
                    weight[y * w + x] = t.min(1.0);
                }
            }
        }
        let mut label = vec![usize::MAX; w * h];
        let mut blobs: Vec<(f64, [f64; 2])> = Vec::new();
        for start in 0..w * h {
            if weight[start] == 0.0 || label[start] != usize::MAX {
                continue;
            }
            let id = blobs.len();
            let mut stack = vec![start];
            label[start] = id;
            let (mut sw, mut sx, mut sy) = (0.0, 0.0, 0.0);
            while let Some(i) = stack.pop() {
                let (x, y) = (i % w, i / w);
                sw += weight[i];
                sx += weight[i] * (x as f64 + 0.5);
                sy += weight[i] * (y as f64 + 0.5);
                let mut push = |j: usize| {
                    if weight[j] > 0.0 && label[j] == usize::MAX {
                        label[j] = id;
                        stack.push(j);
                    }
                };
                if x > 0 {
                    push(i - 1);
                }
                if x + 1 < w {
                    push(i + 1);
                }
                if y > 0 {
                    push(i - w);
                }
                if y + 1 < h {
                    push(i + w);
                }
            }
            blobs.push((sw, [sx / sw, sy / sw]));
        }
        blobs.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut eyes: Vec<[f64; 2]> = blobs.iter().take(2).map(|b| b.1).collect();
        eyes.sort_by(|a, b| a[0].total_cmp(&b[0]));
        let mut keypoints = if eyes.len() == 2 { eyes } else { Vec::new() };
        keypoints.extend(hull);
        Ok(Some(keypoints))
    }
}

/// Keeps the original inside the face hull and the edit outside it, with a
/// linear ramp of `face.feather()` pixels between.
///
/// Pixels beyond the ramp are copied from `edited` unchanged.
pub fn face_composite(
    original: &RgbImage,
    edited: &RgbImage,
    face: Option<&FaceNet>,
    view_index: u32,
) -> Result<RgbImage> {
    original.ensure_same_dims(edited.dims())?;
    let Some(face) = face else {
        return Ok(edited.clone());
    };
    if face.view_index != view_index {
        return Err(Error::Precondition(format!(
            "face keypoints belong to view {}, images to view {view_index}",
            face.view_index
        )));
    }
    original.ensure_same_dims(face.hull_mask.dims())?;
    let weights = face.blend_weights();
    let mut out = edited.clone();
    for ((p, o), &wt) in out.pixels_mut().iter_mut().zip(original.pixels()).zip(&weights) {
        if wt >= 1.0 {
            *p = *o;
        } else if wt > 0.0 {
            for ch in 0..3 {
                p[ch] = wt * o[ch] + (1.0 - wt) * p[ch];
            }
        }
    }
    Ok(out)
}
