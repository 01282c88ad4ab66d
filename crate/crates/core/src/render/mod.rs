//! Screen-space projection of Gaussians and front-to-back alpha compositing.
//!
//! Splats are sorted once per image by camera-space depth (ties broken by
//! source index) and binned into 16×16 tiles. Binning uses the exact
//! footprint where a splat's alpha reaches `1/255`, so it never changes the
//! output; it only skips work.

pub mod grad;

pub use grad::{backward, CloudGradient, GaussianGrad};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat2, Vec2, Vec3};
use crate::prelude::*;
use crate::scene::{CameraView, Gaussian, GaussianCloud};
use crate::sh;
use crate::RgbImage;

/// Per-splat alpha is clamped to this value.
pub const ALPHA_MAX: f64 = 0.99;
/// Splats contributing less alpha than this to a pixel are skipped.
pub const ALPHA_MIN: f64 = 1.0 / 255.0;
/// Screen-space dilation added to every projected covariance (pixels²).
pub const LOW_PASS: f64 = 0.3;
/// Gaussians closer than this (camera-space z) are culled.
pub const NEAR_PLANE: f64 = 0.2;
/// Centers projecting further than this fraction of the image size outside
/// the image are culled.
pub const GUARD_BAND: f64 = 0.5;
pub const TILE_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RenderSettings {
    pub background: Vec3,
}

impl Default for RenderSettings {
    fn default() -> Self {
        Self { background: [0.0; 3] }
    }
}

/// A Gaussian projected into one camera.
#[derive(Debug, Clone, PartialEq)]
pub struct Splat2D {
    pub mean2d: Vec2,
    pub cov2d: Mat2,
    /// Inverse of `cov2d` as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: Vec3,
    pub alpha_base: f64,
    pub source_index: usize,
}

impl Splat2D {
    /// Alpha at a pixel position, or `None` below the contribution cutoff.
    /// Returns `(alpha, gaussian value, clamped)`.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<(f64, f64, bool)> {
        let dx = px - self.mean2d[0];
        let dy = py - self.mean2d[1];
        let [a, b, c] = self.conic;
        let power = -0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy);
        let g = math::exp(power);
        let alpha = self.alpha_base * g;
        if !(alpha >= ALPHA_MIN) {
            return None;
        }
        Some((alpha.min(ALPHA_MAX), g, alpha > ALPHA_MAX))
    }

    /// Inclusive pixel-index bounds whose centers may receive alpha ≥ `ALPHA_MIN`.
    fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        if self.alpha_base < ALPHA_MIN {
            return None;
        }
        let k = 2.0 * math::ln(self.alpha_base / ALPHA_MIN);
        let hx = math::sqrt(k * self.cov2d[0][0]) + 1.0;
        let hy = math::sqrt(k * self.cov2d[1][1]) + 1.0;
        let x0 = math::ceil(self.mean2d[0] - hx - 0.5).max(0.0);
        let y0 = math::ceil(self.mean2d[1] - hy - 0.5).max(0.0);
        let x1 = math::floor(self.mean2d[0] + hx - 0.5).min(width as f64 - 1.0);
        let y1 = math::floor(self.mean2d[1] + hy - 0.5).min(height as f64 - 1.0);
        if x0 > x1 || y0 > y1 {
            return None;
        }
        Some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// Affine (EWA) projection Jacobian of the pinhole map at camera-space `t`.
#[inline]
pub(crate) fn projection_jacobian(cam: &CameraView, t: Vec3) -> [[f64; 3]; 2] {
    let [fx, fy] = cam.focal;
    let inv_z = 1.0 / t[2];
    let inv_z2 = inv_z * inv_z;
    [
        [fx * inv_z, 0.0, -fx * t[0] * inv_z2],
        [0.0, fy * inv_z, -fy * t[1] * inv_z2],
    ]
}

/// `T Σ Tᵀ` for a 2×3 `T` and symmetric 3×3 `Σ`.
#[inline]
pub(crate) fn sandwich(t: &[[f64; 3]; 2], sigma: &[[f64; 3]; 3]) -> Mat2 {
    let mut ts = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            ts[i][j] = t[i][0] * sigma[0][j] + t[i][1] * sigma[1][j] + t[i][2] * sigma[2][j];
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            out[i][j] = ts[i][0] * t[j][0] + ts[i][1] * t[j][1] + ts[i][2] * t[j][2];
        }
    }
    out
}

/// `J · R_w` where `R_w` is the camera rotation.
#[inline]
pub(crate) fn screen_transform(cam: &CameraView, t: Vec3) -> [[f64; 3]; 2] {
    let j = projection_jacobian(cam, t);
    let r = cam.rotation();
    let mut out = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            out[i][k] = j[i][0] * r[0][k] + j[i][1] * r[1][k] + j[i][2] * r[2][k];
        }
    }
    out
}

/// Whether a point at camera-space `t` projecting to `mean2d` is dropped:
/// behind the near plane or outside the guard band around the image.
pub fn is_culled(cam: &CameraView, t: Vec3, mean2d: Vec2) -> bool {
    if !(t[2] > NEAR_PLANE) {
        return true;
    }
    let (w, h) = (cam.width as f64, cam.height as f64);
    mean2d[0] < -GUARD_BAND * w
        || mean2d[0] > (1.0 + GUARD_BAND) * w
        || mean2d[1] < -GUARD_BAND * h
        || mean2d[1] > (1.0 + GUARD_BAND) * h
}

/// Projects one Gaussian; `Ok(None)` when it is culled.
pub fn project_gaussian(g: &Gaussian, cam: &CameraView, source_index: usize) -> Result<Option<Splat2D>> {
    let t = cam.to_camera(g.position());
    if !(t[2] > NEAR_PLANE) {
        return Ok(None);
    }
    let mean2d = cam.project_camera_point(t);
    if is_culled(cam, t, mean2d) {
        return Ok(None);
    }
    let tr = screen_transform(cam, t);
    let mut cov2d = sandwich(&tr, &g.covariance());
    cov2d[0][0] += LOW_PASS;
    cov2d[1][1] += LOW_PASS;
    let det = cov2d[0][0] * cov2d[1][1] - cov2d[0][1] * cov2d[1][0];
    if !(det > 0.0) {
        return Ok(None);
    }
    let inv = 1.0 / det;
    let conic = [cov2d[1][1] * inv, -cov2d[0][1] * inv, cov2d[0][0] * inv];
    let dir = math::normalize3(math::sub3(g.position(), cam.center()));
    let color = sh::sh_to_color(g.sh(), dir)?;
    Ok(Some(Splat2D {
        mean2d,
        cov2d,
        conic,
        depth: t[2],
        color,
        alpha_base: g.opacity(),
        source_index,
    }))
}

/// Front-to-back blending of depth-sorted `(alpha, color)` pairs over a
/// background. Alphas are clamped to `[0, ALPHA_MAX]`. Returns the color and
/// the final transmittance.
pub fn composite_pixel(splats: &[(f64, Vec3)], background: Vec3) -> (Vec3, f64) {
    let mut rgb = [0.0; 3];
    let mut t = 1.0;
    for &(alpha, c) in splats {
        let a = alpha.clamp(0.0, ALPHA_MAX);
        let w = a * t;
        for ch in 0..3 {
            rgb[ch] += c[ch] * w;
        }
        t *= 1.0 - a;
    }
    for ch in 0..3 {
        rgb[ch] += t * background[ch];
    }
    (rgb, t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub pixels: RgbImage,
    /// Final transmittance per pixel, row-major.
    pub transmittance: Vec<f64>,
}

impl RenderedImage {
    pub fn accumulated_weight(&self, x: usize, y: usize) -> f64 {
        1.0 - self.transmittance[y * self.pixels.width() + x]
    }
}

/// Depth-sorted splats and per-tile lists for one camera.
pub(crate) struct Binned {
    pub splats: Vec<Splat2D>,
    pub tiles_x: usize,
    pub tile_lists: Vec<Vec<u32>>,
}

pub(crate) fn check_camera(cam: &CameraView) -> Result<()> {
    if cam.width == 0 || cam.height == 0 {
        return Err(Error::invalid("camera has zero image area"));
    }
    cam.validate()
}

pub(crate) fn bin(cloud: &GaussianCloud, cam: &CameraView) -> Result<Binned> {
    check_camera(cam)?;
    if cloud.is_empty() {
        return Err(Error::invalid("cannot render an empty cloud"));
    }
    let mut splats = Vec::with_capacity(cloud.len());
    for (i, g) in cloud.iter().enumerate() {
        if let Some(s) = project_gaussian(g, cam, i)? {
            splats.push(s);
        }
    }
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.source_index.cmp(&b.source_index)));

    let tiles_x = cam.width.div_ceil(TILE_SIZE);
    let tiles_y = cam.height.div_ceil(TILE_SIZE);
    let mut tile_lists = vec![Vec::new(); tiles_x * tiles_y];
    for (sid, s) in splats.iter().enumerate() {
        if let Some((x0, y0, x1, y1)) = s.pixel_bounds(cam.width, cam.height) {
            for ty in y0 / TILE_SIZE..=y1 / TILE_SIZE {
                for tx in x0 / TILE_SIZE..=x1 / TILE_SIZE {
                    tile_lists[ty * tiles_x + tx].push(sid as u32);
                }
            }
        }
    }
    Ok(Binned {
        splats,
        tiles_x,
        tile_lists,
    })
}

impl Binned {
    pub fn tile_rect(&self, tile: usize, cam: &CameraView) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.tiles_x, tile / self.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        (x0, y0, (x0 + TILE_SIZE).min(cam.width), (y0 + TILE_SIZE).min(cam.height))
    }

    fn render_tile(&self, tile: usize, cam: &CameraView, settings: &RenderSettings) -> Vec<(Vec3, f64)> {
        let (x0, y0, x1, y1) = self.tile_rect(tile, cam);
        let list = &self.tile_lists[tile];
        let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
        for py in y0..y1 {
            for px in x0..x1 {
                let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
                let mut rgb = [0.0; 3];
                let mut t = 1.0;
                for &sid in list {
                    let s = &self.splats[sid as usize];
                    if let Some((alpha, _, _)) = s.alpha_at(fx, fy) {
                        let w = alpha * t;
                        for ch in 0..3 {
                            rgb[ch] += s.color[ch] * w;
                        }
                        t *= 1.0 - alpha;
                    }
                }
                for ch in 0..3 {
                    rgb[ch] += t * settings.background[ch];
                }
                out.push((rgb, t));
            }
        }
        out
    }
}

#[cfg(feature = "parallel")]
pub(crate) fn map_tiles<T: Send>(count: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
    use rayon::prelude::*;
    (0..count).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_tiles<T>(count: usize, f: impl Fn(usize) -> T) -> Vec<T> {
    (0..count).map(f).collect()
}

/// Renders `cloud` from `cam`.
pub fn render_view(cloud: &GaussianCloud, cam: &CameraView, settings: &RenderSettings) -> Result<RenderedImage> {
    let binned = bin(cloud, cam)?;
    let tiles = map_tiles(binned.tile_lists.len(), |tile| binned.render_tile(tile, cam, settings));
    let mut pixels = RgbImage::new(cam.width, cam.height, [0.0; 3]);
    let mut transmittance = vec![1.0; cam.width * cam.height];
    for (tile, values) in tiles.into_iter().enumerate() {
        let (x0, y0, x1, y1) = binned.tile_rect(tile, cam);
        let mut it = values.into_iter();
        for py in y0..y1 {
            for px in x0..x1 {
                let (rgb, t) = it.next().expect("tile pixel count");
                pixels.set(px, py, rgb);
                transmittance[py * cam.width + px] = t;
            }
        }
    }
    Ok(RenderedImage { pixels, transmittance })
}

/// Renders per-pixel blending weights of labelled Gaussian groups.
///
/// Returns one weight plane per label in `0..label_count`; Gaussians whose
/// label is `None` still occlude but contribute no weight.
pub fn render_label_weights(
    cloud: &GaussianCloud,
    labels: &[Option<usize>],
    label_count: usize,
    cam: &CameraView,
) -> Result<Vec<Vec<f64>>> {
    let binned = bin(cloud, cam)?;
    let mut planes = vec![vec![0.0; cam.width * cam.height]; label_count];
    for tile in 0..binned.tile_lists.len() {
        let (x0, y0, x1, y1) = binned.tile_rect(tile, cam);
        for py in y0..y1 {
            for px in x0..x1 {
                let mut t = 1.0;
                for &sid in &binned.tile_lists[tile] {
                    let s = &binned.splats[sid as usize];
                    if let Some((alpha, _, _)) = s.alpha_at(px as f64 + 0.5, py as f64 + 0.5) {
                        if let Some(l) = labels[s.source_index] {
                            planes[l][py * cam.width + px] += alpha * t;
                        }
                        t *= 1.0 - alpha;
                    }
                }
            }
        }
    }
    Ok(planes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mat4_identity;

    fn axis_camera(f: f64, size: usize) -> CameraView {
        CameraView::new(mat4_identity(), [f, f], [size as f64 / 2.0; 2], size, size, 0).unwrap()
    }

    #[test]
    fn on_axis_covariance_matches_closed_form() {
        let cam = axis_camera(100.0, 64);
        let g = Gaussian::with_color([0.0, 0.0, 10.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.8, [0.5; 3]).unwrap();
        let s = project_gaussian(&g, &cam, 0).unwrap().unwrap();
        assert!((s.cov2d[0][0] - 100.3).abs() < 1e-9);
        assert!((s.cov2d[1][1] - 100.3).abs() < 1e-9);
        assert!(s.cov2d[0][1].abs() < 1e-12);
        assert_eq!(s.mean2d, [32.0, 32.0]);
    }

    #[test]
    fn behind_camera_is_culled() {
        let cam = axis_camera(100.0, 64);
        let g = Gaussian::with_color([0.0, 0.0, -1.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.8, [0.5; 3]).unwrap();
        assert!(project_gaussian(&g, &cam, 0).unwrap().is_none());
    }

    #[test]
    fn principal_ray_projects_to_principal_point() {
        let mut cam = axis_camera(80.0, 64);
        cam.principal_point = [30.25, 33.5];
        let g = Gaussian::with_color(
            [0.0, 0.0, 4.0],
            crate::math::Quat::from_axis_angle([1.0, 1.0, 0.0], 0.4).0,
            [0.3, 0.1, 0.2],
            0.5,
            [0.5; 3],
        )
        .unwrap();
        let s = project_gaussian(&g, &cam, 0).unwrap().unwrap();
        assert_eq!(s.mean2d, [30.25, 33.5]);
    }

    #[test]
    fn composite_examples() {
        let red = [1.0, 0.0, 0.0];
        let (c, t) = composite_pixel(&[(1.0, red)], [0.0; 3]);
        assert_eq!(c, [0.99, 0.0, 0.0]);
        assert!((t - 0.01).abs() < 1e-15);

        let (c1, c2, bg) = ([0.2, 0.4, 0.6], [1.0, 0.5, 0.0], [0.1, 0.1, 0.1]);
        let (c, t) = composite_pixel(&[(0.5, c1), (0.5, c2)], bg);
        for ch in 0..3 {
            let expect = 0.5 * c1[ch] + 0.25 * c2[ch] + 0.25 * bg[ch];
            assert!((c[ch] - expect).abs() < 1e-15);
        }
        assert_eq!(t, 0.25);

        let (c, t) = composite_pixel(&[], [0.3, 0.2, 0.1]);
        assert_eq!((c, t), ([0.3, 0.2, 0.1], 1.0));
    }

    #[test]
    fn zero_area_camera_is_rejected() {
        let mut cam = axis_camera(100.0, 64);
        cam.width = 0;
        let g = Gaussian::with_color([0.0, 0.0, 5.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.8, [0.5; 3]).unwrap();
        let cloud = GaussianCloud::new(vec![g]).unwrap();
        assert!(matches!(
            render_view(&cloud, &cam, &RenderSettings::default()),
            Err(Error::InvalidParameter(_))
        ));
    }

    #[test]
    fn all_culled_gives_background() {
        let cam = axis_camera(100.0, 20);
        let g = Gaussian::with_color([0.0, 0.0, -3.0], [1.0, 0.0, 0.0, 0.0], [1.0; 3], 0.8, [0.5; 3]).unwrap();
        let cloud = GaussianCloud::new(vec![g]).unwrap();
        let bg = [0.1, 0.2, 0.3];
        let img = render_view(&cloud, &cam, &RenderSettings { background: bg }).unwrap();
        assert!(img.pixels.pixels().iter().all(|&p| p == bg));
        assert!(img.transmittance.iter().all(|&t| t == 1.0));
    }
}
