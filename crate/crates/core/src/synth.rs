//! A procedurally built person standing on a floor disc, with a ring of
//! cameras and exact annotations. World y points up; the face looks
//! toward +z, which is where view 0 sits.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{ViewAnnotations, ViewDataset, ViewRecord};
use crate::edit::labels;
use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};
use crate::math::{self, Quat, Vec3};
use crate::prelude::*;
use crate::render::{render_label_weights, render_view, RenderSettings};
use crate::scene::{CameraView, Gaussian, GaussianCloud};
use crate::sh::SH_C0;

pub const SKIN_COLOR: [f64; 3] = [0.9, 0.7, 0.55];
pub const EYE_COLOR: [f64; 3] = [0.05, 0.05, 0.3];
pub const HAIR_COLOR: [f64; 3] = [0.25, 0.15, 0.1];
pub const TORSO_COLOR: [f64; 3] = [0.25, 0.35, 0.6];
pub const LEGS_COLOR: [f64; 3] = [0.15, 0.15, 0.2];
pub const FLOOR_COLOR: [f64; 3] = [0.45, 0.42, 0.38];
/// Color of the shirt in [`red_garment_prompt`].
pub const PROMPT_RED: [f64; 3] = [0.8, 0.2, 0.2];

const HEAD_CENTER: Vec3 = [0.0, 1.62, 0.0];
const HEAD_RADIUS: f64 = 0.12;
/// Half-angle of the face cap around +z, in degrees.
const FACE_CAP_DEGREES: f64 = 55.0;
const EYE_X: f64 = 0.04;
const EYE_Y: f64 = 1.64;
const OPACITY: f64 = 0.95;
const THICKNESS: f64 = 0.004;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Floor,
    Legs,
    Torso,
    Hair,
    Face,
    Eye,
}

impl Part {
    /// Parsing label of the part.
    pub fn label(self) -> u8 {
        match self {
            Part::Floor => labels::BACKGROUND,
            Part::Legs => labels::LEGS,
            Part::Torso => labels::TORSO,
            Part::Hair | Part::Face | Part::Eye => labels::HEAD,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    pub ring_radius: f64,
    pub camera_height: f64,
    /// Per-channel amplitude of seeded floor color noise.
    pub floor_variation: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            views: 24,
            width: 128,
            height: 128,
            focal: 190.0,
            ring_radius: 3.2,
            camera_height: 1.0,
            floor_variation: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub cloud: GaussianCloud,
    /// Body part of every Gaussian.
    pub parts: Vec<Part>,
    pub cameras: Vec<CameraView>,
    pub config: SynthConfig,
}

/// Rotation taking local +z to `n`.
fn align_z(n: Vec3) -> [f64; 4] {
    let n = math::normalize3(n);
    let axis = math::cross3([0.0, 0.0, 1.0], n);
    let s = math::norm3(axis);
    let angle = math::atan2(s, n[2]);
    if s < 1e-12 {
        return if n[2] > 0.0 { Quat::IDENTITY.0 } else { [0.0, 1.0, 0.0, 0.0] };
    }
    Quat::from_axis_angle(axis, angle).0
}

fn disc(p: Vec3, normal: Vec3, radius: f64, rgb: [f64; 3]) -> Result<Gaussian> {
    Gaussian::with_color(p, align_z(normal), [radius, radius, THICKNESS], OPACITY, rgb)
}

fn face_axis_angle(p: Vec3) -> f64 {
    let d = math::normalize3(math::sub3(p, HEAD_CENTER));
    math::atan2(math::norm3(math::cross3(d, [0.0, 0.0, 1.0])), d[2])
}

fn eye_position(side: f64) -> Vec3 {
    let (dx, dy) = (side * EYE_X, EYE_Y - HEAD_CENTER[1]);
    let z = math::sqrt(HEAD_RADIUS * HEAD_RADIUS - dx * dx - dy * dy);
    [dx, EYE_Y, z + 0.006]
}

impl SynthScene {
    pub fn build(config: &SynthConfig) -> Result<Self> {
        if config.views == 0 || config.width == 0 || config.height == 0 {
            return Err(Error::invalid("synthetic scene needs views and a non-empty image"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut gs = Vec::new();
        let mut parts = Vec::new();

        let floor_step = 0.15;
        let n = (0.9 / floor_step) as i32;
        for i in -n..=n {
            for k in -n..=n {
                let (x, z) = (i as f64 * floor_step, k as f64 * floor_step);
                if x * x + z * z > 0.81 {
                    continue;
                }
                let mut c = FLOOR_COLOR;
                if config.floor_variation > 0.0 {
                    for ch in &mut c {
                        *ch += config.floor_variation * (2.0 * rng.random::<f64>() - 1.0);
                    }
                }
                gs.push(disc([x, 0.0, z], [0.0, 1.0, 0.0], 0.6 * floor_step, c)?);
                parts.push(Part::Floor);
            }
        }

        for side in [-0.1, 0.1] {
            let r = 0.085;
            for row in 0..8 {
                let y = 0.1 + 0.1 * row as f64;
                for j in 0..6 {
                    let a = core::f64::consts::TAU * (j as f64 + 0.5 * (row % 2) as f64) / 6.0;
                    let n = [math::sin(a), 0.0, math::cos(a)];
                    gs.push(disc([side + r * n[0], y, r * n[2]], n, 0.055, LEGS_COLOR)?);
                    parts.push(Part::Legs);
                }
            }
        }

        let (a, b) = (0.2, 0.13);
        for row in 0..6 {
            let y = 0.93 + 0.08 * row as f64;
            for j in 0..12 {
                let t = core::f64::consts::TAU * (j as f64 + 0.5 * (row % 2) as f64) / 12.0;
                let p = [a * math::sin(t), y, b * math::cos(t)];
                let n = [math::sin(t) / a, 0.0, math::cos(t) / b];
                gs.push(disc(p, n, 0.05, TORSO_COLOR)?);
                parts.push(Part::Torso);
            }
        }

        let head_points = 80;
        let golden = core::f64::consts::PI * (3.0 - math::sqrt(5.0));
        for i in 0..head_points {
            let y = 1.0 - 2.0 * (i as f64 + 0.5) / head_points as f64;
            let r = math::sqrt(1.0 - y * y);
            let phi = golden * i as f64;
            let n = [r * math::cos(phi), y, r * math::sin(phi)];
            let p = math::add3(HEAD_CENTER, math::scale3(n, HEAD_RADIUS));
            let face = face_axis_angle(p) < FACE_CAP_DEGREES.to_radians();
            let (part, c) = if face { (Part::Face, SKIN_COLOR) } else { (Part::Hair, HAIR_COLOR) };
            gs.push(disc(p, n, 0.03, c)?);
            parts.push(part);
        }

        for side in [-1.0, 1.0] {
            gs.push(Gaussian::with_color(
                eye_position(side),
                Quat::IDENTITY.0,
                [0.015; 3],
                OPACITY,
                EYE_COLOR,
            )?);
            parts.push(Part::Eye);
        }

        let cameras = ring_cameras(config)?;
        Ok(Self {
            cloud: GaussianCloud::new(gs)?,
            parts,
            cameras,
            config: *config,
        })
    }

    pub fn indices_of(&self, part: Part) -> Vec<usize> {
        self.parts
            .iter()
            .enumerate()
            .filter(|(_, &p)| p == part)
            .map(|(i, _)| i)
            .collect()
    }

    /// Parsing label of every Gaussian, for [`render_label_weights`].
    pub fn label_assignment(&self) -> Vec<Option<usize>> {
        self.parts.iter().map(|p| Some(p.label() as usize)).collect()
    }

    /// Exact parsing: the label with the largest blending weight, or
    /// background where less than half the pixel is covered.
    pub fn parsing(&self, cam: &CameraView) -> Result<LabelMap> {
        let planes = render_label_weights(&self.cloud, &self.label_assignment(), 4, cam)?;
        let data = (0..cam.width * cam.height)
            .map(|i| {
                let total: f64 = planes.iter().map(|p| p[i]).sum();
                if total < 0.5 {
                    return labels::BACKGROUND;
                }
                let mut best = 0;
                for l in 1..planes.len() {
                    if planes[l][i] > planes[best][i] {
                        best = l;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(cam.width, cam.height, data)
    }

    /// Eye centers followed by points on the face outline, when the face
    /// is turned toward the camera.
    pub fn face_keypoints(&self, cam: &CameraView) -> Option<Vec<[f64; 2]>> {
        let to_cam = math::normalize3(math::sub3(cam.center(), HEAD_CENTER));
        if to_cam[2] <= 0.25 {
            return None;
        }
        let cap = FACE_CAP_DEGREES.to_radians();
        let mut pts: Vec<Vec3> = vec![eye_position(-1.0), eye_position(1.0)];
        for k in 0..8 {
            let psi = core::f64::consts::TAU * k as f64 / 8.0;
            let d = [math::sin(cap) * math::cos(psi), math::sin(cap) * math::sin(psi), math::cos(cap)];
            pts.push(math::add3(HEAD_CENTER, math::scale3(d, HEAD_RADIUS)));
        }
        let mut out: Vec<[f64; 2]> = pts
            .iter()
            .map(|&p| cam.project_camera_point(cam.to_camera(p)))
            .collect();
        if out[0][0] > out[1][0] {
            out.swap(0, 1);
        }
        Some(out)
    }

    /// Projected joints: head, neck, chest, pelvis, knees, feet.
    pub fn pose_keypoints(&self, cam: &CameraView) -> Vec<[f64; 2]> {
        let joints: [Vec3; 8] = [
            HEAD_CENTER,
            [0.0, 1.47, 0.0],
            [0.0, 1.2, 0.0],
            [0.0, 0.9, 0.0],
            [-0.1, 0.45, 0.0],
            [0.1, 0.45, 0.0],
            [-0.1, 0.05, 0.0],
            [0.1, 0.05, 0.0],
        ];
        joints
            .iter()
            .map(|&p| cam.project_camera_point(cam.to_camera(p)))
            .collect()
    }

    /// Renders every camera and packages the views with annotations.
    pub fn dataset(&self) -> Result<ViewDataset> {
        self.dataset_of(&self.cloud)
    }

    /// Like [`dataset`](Self::dataset) but with images rendered from
    /// `cloud`; annotations still come from the scene's own geometry.
    pub fn dataset_of(&self, cloud: &GaussianCloud) -> Result<ViewDataset> {
        let settings = RenderSettings::default();
        let records = self
            .cameras
            .iter()
            .map(|cam| {
                let img = render_view(cloud, cam, &settings)?.pixels;
                let ann = ViewAnnotations {
                    parsing: Some(self.parsing(cam)?),
                    pose_keypoints: Some(self.pose_keypoints(cam)),
                    face_keypoints: self.face_keypoints(cam),
                    dense_pose: None,
                };
                ViewRecord::new(cam.clone(), img, ann)
            })
            .collect::<Result<Vec<_>>>()?;
        ViewDataset::new(records)
    }
}

/// `views` cameras on a horizontal circle around the person.
pub fn ring_cameras(config: &SynthConfig) -> Result<Vec<CameraView>> {
    (0..config.views)
        .map(|i| {
            let t = core::f64::consts::TAU * i as f64 / config.views as f64;
            let eye = [
                config.ring_radius * math::sin(t),
                config.camera_height,
                config.ring_radius * math::cos(t),
            ];
            CameraView::look_at(
                eye,
                [0.0, 0.95, 0.0],
                [0.0, 1.0, 0.0],
                [config.focal; 2],
                config.width,
                config.height,
                i as u32,
            )
        })
        .collect()
}

/// A red shirt on a white backdrop.
pub fn red_garment_prompt(size: usize) -> RgbImage {
    let s = size as f64;
    RgbImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
        let body = (0.3..0.7).contains(&u) && (0.2..0.9).contains(&v);
        let sleeves = (0.15..0.85).contains(&u) && (0.2..0.4).contains(&v);
        if body || sleeves {
            PROMPT_RED
        } else {
            [1.0; 3]
        }
    })
}

/// Adds seeded uniform noise of ±`amplitude` to every Gaussian's base
/// color, keeping it inside `[0.02, 0.98]`.
pub fn perturb_colors(cloud: &GaussianCloud, amplitude: f64, seed: u64) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = cloud.clone();
    for i in 0..out.len() {
        let g = out.get_mut(i).expect("index in range");
        let dc = g.sh()[0];
        let mut c = [0.0; 3];
        for ch in 0..3 {
            let base = 0.5 + SH_C0 * dc[ch];
            let v = (base + amplitude * (2.0 * rng.random::<f64>() - 1.0)).clamp(0.02, 0.98);
            c[ch] = (v - 0.5) / SH_C0;
        }
        g.set_sh_coeff(0, c);
    }
    out
}
