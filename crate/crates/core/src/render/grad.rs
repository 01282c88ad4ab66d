//! Analytic gradients of a per-pixel loss through the renderer.
//!
//! Per-pixel work is split by tile; each tile accumulates into its own
//! buffer and buffers are reduced in tile order, so the result does not
//! depend on how tiles were scheduled.

use super::{bin, map_tiles, screen_transform, Binned, RenderSettings};
use crate::error::Result;
use crate::math::{self, Mat3, Vec3};
use crate::prelude::*;
use crate::scene::{CameraView, GaussianCloud};
use crate::sh::{self, Dual3, ShScalar};

/// Gradient of a scalar loss with respect to one Gaussian's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub position: Vec3,
    /// Tangent to the unit quaternion sphere.
    pub rotation: [f64; 4],
    pub scale: Vec3,
    pub opacity: f64,
    pub sh: Vec<Vec3>,
}

impl GaussianGrad {
    pub fn zero(coeffs: usize) -> Self {
        Self {
            position: [0.0; 3],
            rotation: [0.0; 4],
            scale: [0.0; 3],
            opacity: 0.0,
            sh: vec![[0.0; 3]; coeffs],
        }
    }

    pub fn add_assign(&mut self, o: &GaussianGrad) {
        for k in 0..3 {
            self.position[k] += o.position[k];
            self.scale[k] += o.scale[k];
        }
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.opacity += o.opacity;
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            for ch in 0..3 {
                a[ch] += b[ch];
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.position
            .iter()
            .chain(self.rotation.iter())
            .chain(self.scale.iter())
            .chain(core::iter::once(&self.opacity))
            .chain(self.sh.iter().flatten())
            .all(|v| v.is_finite())
    }
}

/// Gradients for every Gaussian plus each one's total blending weight
/// (sum of `αᵢTᵢ` over pixels) in the rendered view.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGradient {
    pub grads: Vec<GaussianGrad>,
    pub footprint: Vec<f64>,
}

impl CloudGradient {
    pub fn zero(cloud: &GaussianCloud) -> Self {
        let coeffs = sh::coeff_count(cloud.sh_degree());
        Self {
            grads: vec![GaussianGrad::zero(coeffs); cloud.len()],
            footprint: vec![0.0; cloud.len()],
        }
    }

    pub fn accumulate(&mut self, other: &CloudGradient) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
        for (a, b) in self.footprint.iter_mut().zip(&other.footprint) {
            *a += b;
        }
    }
}

/// Screen-space gradient of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct SplatGrad {
    color: Vec3,
    opacity: f64,
    mean: [f64; 2],
    conic: [f64; 3],
    footprint: f64,
}

struct Contribution {
    sid: u32,
    alpha: f64,
    gauss: f64,
    clamped: bool,
    transmittance: f64,
}

fn backward_tile(
    binned: &Binned,
    cam: &CameraView,
    settings: &RenderSettings,
    d_pixels: &[[f64; 3]],
    tile: usize,
) -> Vec<(u32, SplatGrad)> {
    let list = &binned.tile_lists[tile];
    if list.is_empty() {
        return Vec::new();
    }
    // Local slot per splat in this tile's list.
    let mut grads = vec![SplatGrad::default(); list.len()];
    let (x0, y0, x1, y1) = binned.tile_rect(tile, cam);
    let mut contribs: Vec<(usize, Contribution)> = Vec::new();
    for py in y0..y1 {
        for px in x0..x1 {
            let d_c = d_pixels[py * cam.width + px];
            let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
            contribs.clear();
            let mut t = 1.0;
            for (slot, &sid) in list.iter().enumerate() {
                let s = &binned.splats[sid as usize];
                if let Some((alpha, gauss, clamped)) = s.alpha_at(fx, fy) {
                    contribs.push((
                        slot,
                        Contribution {
                            sid,
                            alpha,
                            gauss,
                            clamped,
                            transmittance: t,
                        },
                    ));
                    t *= 1.0 - alpha;
                }
            }
            // Suffix color: everything composited behind the current splat.
            let mut suffix = [
                t * settings.background[0],
                t * settings.background[1],
                t * settings.background[2],
            ];
            for (slot, c) in contribs.iter().rev() {
                let s = &binned.splats[c.sid as usize];
                let w = c.alpha * c.transmittance;
                let g = &mut grads[*slot];
                g.footprint += w;
                for ch in 0..3 {
                    g.color[ch] += d_c[ch] * w;
                }
                let mut d_alpha = 0.0;
                for ch in 0..3 {
                    d_alpha += d_c[ch] * (c.transmittance * s.color[ch] - suffix[ch] / (1.0 - c.alpha));
                }
                for ch in 0..3 {
                    suffix[ch] += s.color[ch] * w;
                }
                if c.clamped {
                    continue;
                }
                g.opacity += d_alpha * c.gauss;
                // α = o·exp(power); ∂α/∂power = α.
                let d_power = d_alpha * c.alpha;
                let dx = fx - s.mean2d[0];
                let dy = fy - s.mean2d[1];
                let [a, b, cc] = s.conic;
                g.mean[0] += d_power * (a * dx + b * dy);
                g.mean[1] += d_power * (b * dx + cc * dy);
                g.conic[0] += d_power * (-0.5 * dx * dx);
                g.conic[1] += d_power * (-dx * dy);
                g.conic[2] += d_power * (-0.5 * dy * dy);
            }
        }
    }
    list.iter().copied().zip(grads).collect()
}

/// Gradient of `Σ_p ⟨d_pixels[p], C_p⟩` with respect to every Gaussian,
/// where `C_p` is the rendered color of pixel `p`.
pub fn backward(
    cloud: &GaussianCloud,
    cam: &CameraView,
    settings: &RenderSettings,
    d_pixels: &[[f64; 3]],
) -> Result<CloudGradient> {
    let binned = bin(cloud, cam)?;
    if d_pixels.len() != cam.width * cam.height {
        return Err(crate::Error::DimensionMismatch {
            expected: (cam.width, cam.height),
            actual: (d_pixels.len(), 1),
        });
    }
    let per_tile = map_tiles(binned.tile_lists.len(), |tile| {
        backward_tile(&binned, cam, settings, d_pixels, tile)
    });
    let mut splat_grads = vec![SplatGrad::default(); binned.splats.len()];
    for tile in per_tile {
        for (sid, g) in tile {
            let acc = &mut splat_grads[sid as usize];
            for k in 0..3 {
                acc.color[k] += g.color[k];
                acc.conic[k] += g.conic[k];
            }
            acc.mean[0] += g.mean[0];
            acc.mean[1] += g.mean[1];
            acc.opacity += g.opacity;
            acc.footprint += g.footprint;
        }
    }

    let mut out = CloudGradient::zero(cloud);
    for (s, sg) in binned.splats.iter().zip(&splat_grads) {
        let i = s.source_index;
        out.footprint[i] = sg.footprint;
        out.grads[i] = gaussian_grad(cloud, cam, s.source_index, sg)?;
    }
    Ok(out)
}

fn gaussian_grad(cloud: &GaussianCloud, cam: &CameraView, index: usize, sg: &SplatGrad) -> Result<GaussianGrad> {
    let g = &cloud.gaussians()[index];
    let coeffs = g.sh();
    let mut out = GaussianGrad::zero(coeffs.len());
    out.opacity = sg.opacity;

    // Color → SH coefficients and view direction.
    let center = cam.center();
    let view = math::sub3(g.position(), center);
    let dist = math::norm3(view);
    let dir = math::scale3(view, 1.0 / dist);
    let raw = sh::sh_to_color_unclamped(coeffs, dir)?;
    let mut d_color = sg.color;
    for ch in 0..3 {
        if !(0.0..=1.0).contains(&raw[ch]) {
            d_color[ch] = 0.0;
        }
    }
    let degree = g.sh_degree();
    let dual = [Dual3::var(dir[0], 0), Dual3::var(dir[1], 1), Dual3::var(dir[2], 2)];
    let mut basis = [Dual3::lit(0.0); 16];
    sh::basis(degree, dual, &mut basis);
    let mut d_dir = [0.0; 3];
    for (k, c) in coeffs.iter().enumerate() {
        for ch in 0..3 {
            out.sh[k][ch] = d_color[ch] * basis[k].v;
            for ax in 0..3 {
                d_dir[ax] += d_color[ch] * c[ch] * basis[k].d[ax];
            }
        }
    }
    // dir = v/|v|: ∂dir/∂v = (I − dir dirᵀ)/|v|.
    let along = math::dot3(d_dir, dir);
    let mut d_pos = [0.0; 3];
    for ax in 0..3 {
        d_pos[ax] = (d_dir[ax] - along * dir[ax]) / dist;
    }

    // Screen-space mean and covariance → camera-space point, Σ.
    let t = cam.to_camera(g.position());
    let [fx, fy] = cam.focal;
    let (x, y, z) = (t[0], t[1], t[2]);
    let (iz, iz2, iz3) = (1.0 / z, 1.0 / (z * z), 1.0 / (z * z * z));
    let mut d_t = [
        sg.mean[0] * fx * iz,
        sg.mean[1] * fy * iz,
        -sg.mean[0] * fx * x * iz2 - sg.mean[1] * fy * y * iz2,
    ];

    // Conic (a, b, c) = inverse of cov2d (A, B, C).
    let s = cloud_splat_cov(cam, g, t);
    let (ca, cb, cc) = (s[0][0], s[0][1], s[1][1]);
    let det = ca * cc - cb * cb;
    let d2 = det * det;
    let [ga, gb, gc] = sg.conic;
    let d_a = (ga * (-cc * cc) + gb * (cb * cc) + gc * (-cb * cb)) / d2;
    let d_b = (ga * (2.0 * cb * cc) + gb * (-det - 2.0 * cb * cb) + gc * (2.0 * ca * cb)) / d2;
    let d_c = (ga * (-cb * cb) + gb * (ca * cb) + gc * (-ca * ca)) / d2;
    // Symmetric G with dL = tr(G dCov).
    let gm = [[d_a, 0.5 * d_b], [0.5 * d_b, d_c]];

    let sigma = g.covariance();
    let tr = screen_transform(cam, t);
    // ∂L/∂T = 2 G T Σ.
    let mut ts = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            ts[i][j] = tr[i][0] * sigma[0][j] + tr[i][1] * sigma[1][j] + tr[i][2] * sigma[2][j];
        }
    }
    let mut d_tr = [[0.0; 3]; 2];
    for i in 0..2 {
        for j in 0..3 {
            d_tr[i][j] = 2.0 * (gm[i][0] * ts[0][j] + gm[i][1] * ts[1][j]);
        }
    }
    // T = J R_w ⇒ ∂L/∂J = ∂L/∂T R_wᵀ.
    let rw = cam.rotation();
    let mut d_j = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            d_j[i][k] = d_tr[i][0] * rw[k][0] + d_tr[i][1] * rw[k][1] + d_tr[i][2] * rw[k][2];
        }
    }
    d_t[0] += d_j[0][2] * (-fx * iz2);
    d_t[1] += d_j[1][2] * (-fy * iz2);
    d_t[2] += d_j[0][0] * (-fx * iz2)
        + d_j[0][2] * (2.0 * fx * x * iz3)
        + d_j[1][1] * (-fy * iz2)
        + d_j[1][2] * (2.0 * fy * y * iz3);

    // Camera-space → world position.
    for ax in 0..3 {
        d_pos[ax] += rw[0][ax] * d_t[0] + rw[1][ax] * d_t[1] + rw[2][ax] * d_t[2];
    }
    out.position = d_pos;

    // ∂L/∂Σ = Tᵀ G T.
    let mut d_sigma: Mat3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut acc = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    acc += tr[a][i] * gm[a][b] * tr[b][j];
                }
            }
            d_sigma[i][j] = acc;
        }
    }
    // Σ = M Mᵀ, M = R S ⇒ ∂L/∂M = 2 ∂L/∂Σ M.
    let r = g.rotation().to_matrix();
    let sc = g.scale();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * sc[j];
        }
    }
    let d_m = math::mat3_mul(&d_sigma, &m);
    let mut d_r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let v = 2.0 * d_m[i][j];
            out.scale[j] += v * r[i][j];
            d_r[i][j] = v * sc[j];
        }
    }
    out.rotation = g.rotation().backprop_matrix(&d_r);
    Ok(out)
}

/// The projected covariance (with low-pass) used during rendering.
fn cloud_splat_cov(cam: &CameraView, g: &crate::scene::Gaussian, t: Vec3) -> [[f64; 2]; 2] {
    let tr = screen_transform(cam, t);
    let mut c = super::sandwich(&tr, &g.covariance());
    c[0][0] += super::LOW_PASS;
    c[1][1] += super::LOW_PASS;
    c
}
