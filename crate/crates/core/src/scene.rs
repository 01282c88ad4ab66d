//! Gaussian scene representation, calibrated cameras, and the closed-form
//! covariance/density math.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{self, Mat3, Mat4, Quat, Vec3};
use crate::prelude::*;
use crate::sh;

/// Covariances with a larger eigenvalue ratio are treated as singular.
pub const MAX_CONDITION: f64 = 1e12;

/// One anisotropic 3D Gaussian.
///
/// Fields are private so every mutation keeps the invariants: unit
/// rotation, strictly positive scale, opacity in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    position: Vec3,
    rotation: Quat,
    scale: Vec3,
    opacity: f64,
    sh: Vec<Vec3>,
}

fn finite(v: &[f64], what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("non-finite {what}")))
    }
}

impl Gaussian {
    pub fn new(position: Vec3, rotation: [f64; 4], scale: Vec3, opacity: f64, sh: Vec<Vec3>) -> Result<Self> {
        finite(&position, "position")?;
        finite(&rotation, "rotation")?;
        finite(&scale, "scale")?;
        finite(&[opacity], "opacity")?;
        if scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::invalid("scale components must be positive"));
        }
        if !(0.0..=1.0).contains(&opacity) {
            return Err(Error::invalid("opacity must lie in [0, 1]"));
        }
        if !(0..=sh::MAX_SH_DEGREE).any(|d| sh::coeff_count(d) == sh.len()) {
            return Err(Error::invalid("SH coefficient count is not (L+1)²"));
        }
        for c in &sh {
            finite(c, "SH coefficient")?;
        }
        if rotation.iter().all(|&c| c == 0.0) {
            return Err(Error::invalid("zero quaternion"));
        }
        Ok(Self {
            position,
            rotation: Quat::normalized(rotation),
            scale,
            opacity,
            sh,
        })
    }

    /// Degree-0 Gaussian whose rendered color is exactly `rgb` (before clamping).
    pub fn with_color(position: Vec3, rotation: [f64; 4], scale: Vec3, opacity: f64, rgb: Vec3) -> Result<Self> {
        let dc = [
            (rgb[0] - 0.5) / sh::SH_C0,
            (rgb[1] - 0.5) / sh::SH_C0,
            (rgb[2] - 0.5) / sh::SH_C0,
        ];
        Self::new(position, rotation, scale, opacity, vec![dc])
    }

    pub fn position(&self) -> Vec3 {
        self.position
    }
    pub fn rotation(&self) -> Quat {
        self.rotation
    }
    pub fn scale(&self) -> Vec3 {
        self.scale
    }
    pub fn opacity(&self) -> f64 {
        self.opacity
    }
    pub fn sh(&self) -> &[Vec3] {
        &self.sh
    }
    pub fn sh_degree(&self) -> usize {
        match self.sh.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            _ => 3,
        }
    }

    pub fn set_position(&mut self, p: Vec3) {
        if p.iter().all(|c| c.is_finite()) {
            self.position = p;
        }
    }
    /// Stores `q` re-normalized; non-finite or zero input is ignored.
    pub fn set_rotation(&mut self, q: [f64; 4]) {
        if q.iter().all(|c| c.is_finite()) && q.iter().any(|&c| c != 0.0) {
            self.rotation = Quat::normalized(q);
        }
    }
    /// Components are floored at a tiny positive value.
    pub fn set_scale(&mut self, s: Vec3) {
        if s.iter().all(|c| c.is_finite()) {
            self.scale = [s[0].max(1e-9), s[1].max(1e-9), s[2].max(1e-9)];
        }
    }
    pub fn set_opacity(&mut self, o: f64) {
        if o.is_finite() {
            self.opacity = o.clamp(0.0, 1.0);
        }
    }
    pub fn set_sh_coeff(&mut self, k: usize, c: Vec3) {
        if c.iter().all(|v| v.is_finite()) {
            self.sh[k] = c;
        }
    }

    pub fn covariance(&self) -> Mat3 {
        covariance_from(&self.rotation, self.scale)
    }
}

fn covariance_from(rotation: &Quat, scale: Vec3) -> Mat3 {
    let r = rotation.to_matrix();
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = r[i][j] * scale[j];
        }
    }
    let mut sigma = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            sigma[i][j] = m[i][0] * m[j][0] + m[i][1] * m[j][1] + m[i][2] * m[j][2];
        }
    }
    sigma
}

/// `Σ = R S Sᵀ Rᵀ` for a unit quaternion and positive per-axis scale.
pub fn build_covariance(rotation: [f64; 4], scale: Vec3) -> Result<Mat3> {
    finite(&rotation, "rotation")?;
    finite(&scale, "scale")?;
    if scale.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("scale components must be positive"));
    }
    let n = Quat(rotation).norm();
    if (n - 1.0).abs() > 1e-6 {
        return Err(Error::invalid("rotation is not a unit quaternion"));
    }
    Ok(covariance_from(&Quat::normalized(rotation), scale))
}

/// Unnormalized Gaussian density `exp(−½ xᵀ Σ⁻¹ x)`.
pub fn evaluate_gaussian(sigma: &Mat3, offset: Vec3) -> Result<f64> {
    finite(&offset, "offset")?;
    for row in sigma {
        finite(row, "covariance")?;
    }
    let ev = math::sym3_eigenvalues(sigma);
    if ev[0] <= 0.0 || ev[2] / ev[0] > MAX_CONDITION {
        return Err(Error::DegenerateCovariance {
            condition: if ev[0] <= 0.0 { f64::INFINITY } else { ev[2] / ev[0] },
        });
    }
    let l = math::cholesky3(sigma).ok_or(Error::DegenerateCovariance {
        condition: f64::INFINITY,
    })?;
    let solved = math::cholesky3_solve(&l, offset);
    Ok(math::exp(-0.5 * math::dot3(offset, solved)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianCloud {
    gaussians: Vec<Gaussian>,
    sh_degree: usize,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>) -> Result<Self> {
        let sh_degree = gaussians.first().map(Gaussian::sh_degree).unwrap_or(0);
        if gaussians.iter().any(|g| g.sh_degree() != sh_degree) {
            return Err(Error::invalid("all Gaussians must share one SH degree"));
        }
        Ok(Self { gaussians, sh_degree })
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }
    pub fn len(&self) -> usize {
        self.gaussians.len()
    }
    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }
    pub fn gaussians(&self) -> &[Gaussian] {
        &self.gaussians
    }
    pub fn get(&self, i: usize) -> Option<&Gaussian> {
        self.gaussians.get(i)
    }
    pub fn get_mut(&mut self, i: usize) -> Option<&mut Gaussian> {
        self.gaussians.get_mut(i)
    }
    pub fn iter(&self) -> core::slice::Iter<'_, Gaussian> {
        self.gaussians.iter()
    }

    /// True iff every Gaussian's parameters have identical bit patterns.
    pub fn bit_identical(&self, other: &GaussianCloud) -> bool {
        self.gaussians.len() == other.gaussians.len()
            && self
                .gaussians
                .iter()
                .zip(&other.gaussians)
                .all(|(a, b)| gaussian_bits(a) == gaussian_bits(b))
    }
}

/// Every parameter of a Gaussian as raw bits.
pub fn gaussian_bits(g: &Gaussian) -> Vec<u64> {
    g.position
        .iter()
        .chain(g.rotation.0.iter())
        .chain(g.scale.iter())
        .chain(core::iter::once(&g.opacity))
        .chain(g.sh.iter().flatten())
        .map(|v| v.to_bits())
        .collect()
}

/// Calibrated pinhole camera. Camera space is x right, y down, z forward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraView {
    pub world_to_camera: Mat4,
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
    pub view_index: u32,
}

impl CameraView {
    pub fn new(
        world_to_camera: Mat4,
        focal: [f64; 2],
        principal_point: [f64; 2],
        width: usize,
        height: usize,
        view_index: u32,
    ) -> Result<Self> {
        let cam = Self {
            world_to_camera,
            focal,
            principal_point,
            width,
            height,
            view_index,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target` with world `up`.
    pub fn look_at(
        eye: Vec3,
        target: Vec3,
        up: Vec3,
        focal: [f64; 2],
        width: usize,
        height: usize,
        view_index: u32,
    ) -> Result<Self> {
        let forward = math::normalize3(math::sub3(target, eye));
        let right = math::normalize3(math::cross3(forward, up));
        // Image y points down.
        let down = math::cross3(forward, right);
        let rot = [right, down, forward];
        let t = math::scale3(math::mat3_vec(&rot, eye), -1.0);
        let mut m = math::mat4_identity();
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] = rot[i][j];
            }
            m[i][3] = t[i];
        }
        Self::new(
            m,
            focal,
            [width as f64 * 0.5, height as f64 * 0.5],
            width,
            height,
            view_index,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for row in &self.world_to_camera {
            finite(row, "pose")?;
        }
        if !(self.focal[0] > 0.0 && self.focal[1] > 0.0) {
            return Err(Error::invalid("focal lengths must be positive"));
        }
        finite(&self.principal_point, "principal point")?;
        let r = self.rotation();
        let rrt = math::mat3_mul(&r, &math::mat3_transpose(&r));
        let id = math::mat3_identity();
        for i in 0..3 {
            for j in 0..3 {
                if (rrt[i][j] - id[i][j]).abs() > 1e-6 {
                    return Err(Error::invalid("camera rotation is not orthonormal"));
                }
            }
        }
        let bottom = self.world_to_camera[3];
        if bottom != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("pose is not a rigid transform"));
        }
        Ok(())
    }

    pub fn rotation(&self) -> Mat3 {
        let m = &self.world_to_camera;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        let m = &self.world_to_camera;
        [m[0][3], m[1][3], m[2][3]]
    }

    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        math::add3(math::mat3_vec(&self.rotation(), p), self.translation())
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vec3 {
        let rt = math::mat3_transpose(&self.rotation());
        math::scale3(math::mat3_vec(&rt, self.translation()), -1.0)
    }

    /// Pinhole projection of a camera-space point (pixel centers at `+0.5`).
    pub fn project_camera_point(&self, t: Vec3) -> [f64; 2] {
        [
            self.focal[0] * t[0] / t[2] + self.principal_point[0],
            self.focal[1] * t[1] / t[2] + self.principal_point[1],
        ]
    }
}
