//! Job files, flag overrides, service wiring and artifact output shared by
//! the command line and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use gsvton_core::dataset::ViewDataset;
use gsvton_core::edit::{AuxProvider, EditorBinding, GarmentPrompt};
use gsvton_core::metrics::{MetricReport, Pairing};
use gsvton_core::refine::{AnnotatedFaceDetector, AnnotatedSegmenter, FaceDetector, MockFaceDetector, Segmenter};
use gsvton_core::render::{render_view, RenderSettings};
use gsvton_core::strategy::{run_job, Components, EditJob, EditReport, Strategy};
use gsvton_core::{GaussianCloud, RgbImage};

use crate::error::{IoError, Result};
use crate::io::manifest::{log_to_jsonl, read_json, write_json};
use crate::io::{self, ply, png};
use crate::remote::{RemoteClient, RemoteEditor, RemoteFaceDetector, RemoteParser, RemoteSegmenter, SegmenterChain, ENDPOINT_ENV};

/// An edit job as stored on disk: the job itself plus optional input
/// paths, relative to the job file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
    #[serde(flatten)]
    pub job: EditJob,
}

pub fn load_job_file(path: &Path) -> Result<JobFile> {
    read_json(path)
}

/// Command-line overrides of job settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<Strategy>,
    pub tau: Option<f64>,
    pub rho: Option<f64>,
    pub jitter: Option<f64>,
}

impl Overrides {
    /// Applies the overrides and returns them as `name → value` for the
    /// report.
    pub fn apply(&self, job: &mut EditJob) -> Result<BTreeMap<String, String>> {
        let mut log = BTreeMap::new();
        if let Some(seed) = self.seed {
            job.seed = seed;
            match &mut job.editor {
                EditorBinding::Mock { seed: s, .. } | EditorBinding::Remote { seed: s, .. } => *s = seed,
            }
            log.insert("seed".into(), seed.to_string());
        }
        if let Some(s) = self.strategy {
            job.strategy = s;
            log.insert("strategy".into(), s.as_str().into());
        }
        if let Some(tau) = self.tau {
            job.refine.tau = tau;
            log.insert("tau".into(), tau.to_string());
        }
        if let Some(rho) = self.rho {
            job.region_rho = rho;
            log.insert("rho".into(), rho.to_string());
        }
        if let Some(j) = self.jitter {
            match &mut job.editor {
                EditorBinding::Mock { jitter, .. } => *jitter = j,
                EditorBinding::Remote { .. } => {
                    return Err(gsvton_core::Error::InvalidParameter("--jitter only applies to the mock editor".into()).into())
                }
            }
            log.insert("jitter".into(), j.to_string());
        }
        Ok(log)
    }
}

/// Fills an empty remote endpoint from the environment.
pub fn resolve_endpoint(job: &mut EditJob) {
    if let EditorBinding::Remote { endpoint, .. } = &mut job.editor {
        if endpoint.is_empty() {
            if let Ok(v) = std::env::var(ENDPOINT_ENV) {
                *endpoint = v;
            }
        }
    }
}

fn has_face_annotations(dataset: &ViewDataset) -> bool {
    dataset.records().iter().any(|r| r.annotations.face_keypoints.is_some())
}

/// Runs `job` with the services its editor binding implies.
///
/// Annotations in the dataset win: annotated face keypoints and parsings
/// are used directly, and services only fill the gaps. A mock binding
/// pairs the mock editor with the color-based mock face detector.
pub fn run_with_bindings(
    cloud: &GaussianCloud,
    dataset: &mut ViewDataset,
    job: &EditJob,
    prompt: &GarmentPrompt,
) -> Result<(GaussianCloud, EditReport)> {
    job.validate()?;
    let annotated_face = AnnotatedFaceDetector::from_dataset(dataset);
    let annotated_seg = AnnotatedSegmenter::from_dataset(dataset);
    let use_annotated_face = has_face_annotations(dataset);
    let out = match &job.editor {
        EditorBinding::Mock { .. } => {
            let editor = job.mock_editor().expect("mock binding");
            let mock_face = MockFaceDetector::default();
            let face: &dyn FaceDetector = if use_annotated_face { &annotated_face } else { &mock_face };
            let comps = Components {
                editor: &editor,
                face,
                segmenter: &annotated_seg,
                aux: None,
            };
            run_job(cloud, dataset, job, prompt, &comps)?
        }
        EditorBinding::Remote {
            endpoint, timeout_secs, ..
        } => {
            let client = RemoteClient::new(endpoint, *timeout_secs);
            let editor = RemoteEditor { client: client.clone() };
            let remote_face = RemoteFaceDetector { client: client.clone() };
            let remote_seg = RemoteSegmenter { client: client.clone() };
            let parser = RemoteParser { client };
            let face: &dyn FaceDetector = if use_annotated_face { &annotated_face } else { &remote_face };
            let segmenter = SegmenterChain {
                first: &annotated_seg,
                fallback: &remote_seg,
            };
            let seg: &dyn Segmenter = &segmenter;
            let aux: &dyn AuxProvider = &parser;
            let comps = Components {
                editor: &editor,
                face,
                segmenter: seg,
                aux: Some(aux),
            };
            run_job(cloud, dataset, job, prompt, &comps)?
        }
    };
    Ok(out)
}

/// Resolves `p` against the directory of `base`.
pub fn relative_to(base: &Path, p: &str) -> PathBuf {
    base.parent().map(|d| d.join(p)).unwrap_or_else(|| PathBuf::from(p))
}

pub fn load_prompt(job: &EditJob, job_path: Option<&Path>) -> Result<GarmentPrompt> {
    if job.prompt_image.is_empty() {
        return Err(gsvton_core::Error::Precondition("job names no prompt image".into()).into());
    }
    let path = match job_path {
        Some(j) => relative_to(j, &job.prompt_image),
        None => PathBuf::from(&job.prompt_image),
    };
    Ok(GarmentPrompt::new(png::load_rgb(&path)?, job.target_region)?)
}

/// Index of everything a command wrote under its output directory.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputIndex {
    pub command: String,
    /// `kind → relative paths`.
    pub files: BTreeMap<String, Vec<String>>,
}

impl OutputIndex {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            files: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, kind: &str, path: impl Into<String>) {
        self.files.entry(kind.into()).or_default().push(path.into());
    }

    pub fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join("manifest.json"), self)
    }
}

/// What to write besides the PLY, report and log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditOutputs {
    /// Final renders of every view.
    pub renders: bool,
    /// One strip per view: original, refined target, final render.
    pub grids: bool,
}

pub fn render_all(cloud: &GaussianCloud, dataset: &ViewDataset) -> Result<Vec<(u32, RgbImage)>> {
    dataset
        .records()
        .iter()
        .map(|r| Ok((r.view_index(), render_view(cloud, r.camera(), &RenderSettings::default())?.pixels)))
        .collect()
}

/// Images side by side, top-aligned, on black.
pub fn hstack(images: &[&RgbImage]) -> RgbImage {
    let w = images.iter().map(|i| i.width()).sum();
    let h = images.iter().map(|i| i.height()).max().unwrap_or(0);
    let mut out = RgbImage::new(w, h, [0.0; 3]);
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                out.set(x0 + x, y, img.get(x, y));
            }
        }
        x0 += img.width();
    }
    out
}

/// Writes the edited scene, report, update log and images of one run
/// under `out`, registering them in `index` with paths prefixed by
/// `prefix`.
pub fn write_edit_artifacts(
    out: &Path,
    prefix: &str,
    cloud: &GaussianCloud,
    dataset: &ViewDataset,
    report: &EditReport,
    outputs: EditOutputs,
    index: &mut OutputIndex,
) -> Result<()> {
    let dir = out.join(prefix);
    let rel = |p: &str| if prefix.is_empty() { p.to_string() } else { format!("{prefix}/{p}") };
    ply::save_ply(&dir.join("edited.ply"), cloud)?;
    index.add("scene", rel("edited.ply"));
    write_json(&dir.join("report.json"), report)?;
    index.add("report", rel("report.json"));
    io::write_file(&dir.join("update_log.jsonl"), log_to_jsonl(dataset.update_log()).as_bytes())?;
    index.add("update_log", rel("update_log.jsonl"));
    if outputs.renders || outputs.grids {
        let renders = render_all(cloud, dataset)?;
        for (r, (v, img)) in dataset.records().iter().zip(&renders) {
            if outputs.renders {
                let p = format!("renders/view_{v:03}.png");
                png::save_rgb(&dir.join(&p), img)?;
                index.add("render", rel(&p));
            }
            if outputs.grids {
                let p = format!("grids/view_{v:03}.png");
                png::save_rgb(&dir.join(&p), &hstack(&[r.original(), r.current(), img]))?;
                index.add("grid", rel(&p));
            }
        }
    }
    Ok(())
}

/// Differences between two edit reports, `b − a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportComparison {
    pub a: Strategy,
    pub b: Strategy,
    pub total_steps: [usize; 2],
    pub same_editable_set: bool,
    /// `(pairing, mean PSNR a, mean PSNR b)`.
    pub mean_psnr: Vec<(Pairing, f64, f64)>,
    pub mean_ssim: Vec<(Pairing, f64, f64)>,
    /// `(step, hue variance a, hue variance b)` at probe steps both share.
    pub hue_variance: Vec<(usize, f64, f64)>,
    pub flagged: [usize; 2],
    pub re_edited: [usize; 2],
}

fn metric_of(report: &EditReport, pairing: Pairing) -> Option<&MetricReport> {
    report.final_metrics.iter().find(|m| m.pairing == pairing)
}

pub fn compare_reports(a: &EditReport, b: &EditReport) -> ReportComparison {
    let mut mean_psnr = Vec::new();
    let mut mean_ssim = Vec::new();
    for m in &a.final_metrics {
        if let Some(n) = metric_of(b, m.pairing) {
            mean_psnr.push((m.pairing, m.mean_psnr, n.mean_psnr));
            mean_ssim.push((m.pairing, m.mean_ssim, n.mean_ssim));
        }
    }
    let hue_variance = a
        .probes
        .iter()
        .filter_map(|p| {
            b.probes
                .iter()
                .find(|q| q.step == p.step)
                .map(|q| (p.step, p.hue_variance, q.hue_variance))
        })
        .collect();
    let count = |r: &EditReport, f: fn(&gsvton_core::strategy::RoundReport) -> usize| r.rounds.iter().map(f).sum();
    ReportComparison {
        a: a.strategy,
        b: b.strategy,
        total_steps: [a.total_steps, b.total_steps],
        same_editable_set: a.editable == b.editable,
        mean_psnr,
        mean_ssim,
        hue_variance,
        flagged: [count(a, |r| r.flagged.len()), count(b, |r| r.flagged.len())],
        re_edited: [count(a, |r| r.re_edited.len()), count(b, |r| r.re_edited.len())],
    }
}

/// What a failed command leaves behind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub command: String,
    pub kind: String,
    pub message: String,
    /// Per-view failures of an aborted round.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub failures: Vec<(u32, String)>,
}

impl ErrorReport {
    pub fn new(command: &str, err: &IoError) -> Self {
        let failures = match err {
            IoError::Core(gsvton_core::Error::RoundAborted { failures, .. }) => failures.clone(),
            IoError::Core(gsvton_core::Error::EditorUnavailable { view_index, reason }) => {
                vec![(*view_index, reason.clone())]
            }
            _ => Vec::new(),
        };
        Self {
            command: command.into(),
            kind: err.kind().into(),
            message: err.to_string(),
            failures,
        }
    }
}
