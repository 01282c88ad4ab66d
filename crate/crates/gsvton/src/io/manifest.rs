//! JSON view manifests, camera paths and update-log export.
//!
//! Paths inside a manifest are relative to the manifest's directory.
//! `world_to_camera` is a row-major 4×4 matrix in the camera convention of
//! the core crate: x right, y down, z forward.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gsvton_core::dataset::{LogEvent, ViewAnnotations, ViewDataset, ViewRecord};
use gsvton_core::math::Mat4;
use gsvton_core::CameraView;

use crate::error::{IoError, Result};
use crate::io::png;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestView {
    pub index: u32,
    pub image_path: String,
    pub world_to_camera: Mat4,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Grayscale PNG of body-part labels.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parsing_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pose_keypoints: Option<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_keypoints: Option<Vec<[f64; 2]>>,
}

impl ManifestView {
    pub fn camera(&self) -> gsvton_core::Result<CameraView> {
        CameraView::new(
            self.world_to_camera,
            [self.fx, self.fy],
            [self.cx, self.cy],
            self.width,
            self.height,
            self.index,
        )
    }

    pub fn from_camera(cam: &CameraView, image_path: String) -> Self {
        Self {
            index: cam.view_index,
            image_path,
            world_to_camera: cam.world_to_camera,
            fx: cam.focal[0],
            fy: cam.focal[1],
            cx: cam.principal_point[0],
            cy: cam.principal_point[1],
            width: cam.width,
            height: cam.height,
            parsing_path: None,
            pose_keypoints: None,
            face_keypoints: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub id: String,
    pub views: Vec<ManifestView>,
}

fn malformed(path: &Path, msg: impl Into<String>) -> IoError {
    IoError::Manifest {
        path: path.to_path_buf(),
        msg: msg.into(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let bytes = super::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| malformed(path, e.to_string()))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Loads every view's original image and annotations.
pub fn load_dataset(path: &Path) -> Result<ViewDataset> {
    let manifest = read_manifest(path)?;
    let mut seen = BTreeSet::new();
    for v in &manifest.views {
        if !seen.insert(v.index) {
            return Err(gsvton_core::Error::DuplicateViewIndex(v.index).into());
        }
    }
    let dir = base_dir(path);
    let records = manifest
        .views
        .iter()
        .map(|v| {
            let cam = v.camera().map_err(|e| malformed(path, format!("view {}: {e}", v.index)))?;
            let image = png::load_rgb(&dir.join(&v.image_path))?;
            let parsing = match &v.parsing_path {
                Some(p) => Some(png::load_labels(&dir.join(p))?),
                None => None,
            };
            let annotations = ViewAnnotations {
                parsing,
                pose_keypoints: v.pose_keypoints.clone(),
                face_keypoints: v.face_keypoints.clone(),
                dense_pose: None,
            };
            Ok(ViewRecord::new(cam, image, annotations)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ViewDataset::new(records)?)
}

/// Writes each view's current image (and parsing, if any) as PNG under
/// `dir`, plus a manifest at `dir/name`. Returns the written paths,
/// relative to `dir`.
pub fn write_dataset(dir: &Path, name: &str, id: &str, dataset: &ViewDataset) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut views = Vec::with_capacity(dataset.len());
    for r in dataset.records() {
        let v = r.view_index();
        let image_path = format!("images/view_{v:03}.png");
        png::save_rgb(&dir.join(&image_path), r.current())?;
        files.push(image_path.clone());
        let mut mv = ManifestView::from_camera(r.camera(), image_path);
        if let Some(p) = &r.annotations.parsing {
            let parsing_path = format!("parsing/view_{v:03}.png");
            png::save_labels(&dir.join(&parsing_path), p)?;
            files.push(parsing_path.clone());
            mv.parsing_path = Some(parsing_path);
        }
        mv.pose_keypoints = r.annotations.pose_keypoints.clone();
        mv.face_keypoints = r.annotations.face_keypoints.clone();
        views.push(mv);
    }
    let manifest = Manifest {
        id: id.to_string(),
        views,
    };
    write_json(&dir.join(name), &manifest)?;
    files.push(name.to_string());
    Ok(files)
}

/// One camera of a render path: a bare pose that borrows intrinsics, or a
/// full manifest-style camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PathCamera {
    Pose(Mat4),
    Full {
        world_to_camera: Mat4,
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    },
}

/// Intrinsics applied to bare poses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub focal: [f64; 2],
    pub principal_point: [f64; 2],
    pub width: usize,
    pub height: usize,
}

pub fn load_camera_path(path: &Path, intrinsics: &Intrinsics) -> Result<Vec<CameraView>> {
    let bytes = super::read_file(path)?;
    let entries: Vec<PathCamera> = serde_json::from_slice(&bytes).map_err(|e| malformed(path, e.to_string()))?;
    entries
        .into_iter()
        .enumerate()
        .map(|(i, e)| {
            let cam = match e {
                PathCamera::Pose(m) => CameraView::new(
                    m,
                    intrinsics.focal,
                    intrinsics.principal_point,
                    intrinsics.width,
                    intrinsics.height,
                    i as u32,
                ),
                PathCamera::Full {
                    world_to_camera,
                    fx,
                    fy,
                    cx,
                    cy,
                    width,
                    height,
                } => CameraView::new(world_to_camera, [fx, fy], [cx, cy], width, height, i as u32),
            };
            cam.map_err(|e| malformed(path, format!("camera {i}: {e}")))
        })
        .collect()
}

/// One JSON object per line, images omitted.
pub fn log_to_jsonl(events: &[LogEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("log events serialize"));
        out.push('\n');
    }
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    super::write_file(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = super::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| IoError::format(path, e.to_string()))
}
