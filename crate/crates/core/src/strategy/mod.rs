//! Editing schedulers.
//!
//! [`run_err`] edits and refines every view, commits all of them in one
//! transaction, then optimizes. [`run_iterative_du`] is the baseline that
//! swaps views in one at a time between short optimization bursts.

pub mod probe;
pub mod track;

use serde::{Deserialize, Serialize};

use crate::dataset::{EditStage, ViewDataset, ViewRecord};
use crate::edit::{
    edit_view, synthesize_aux_inputs, AuxInputs, AuxProvider, EditPass, EditRequest, Editor, EditorBinding,
    GarmentPrompt, MockEditor, TargetRegion,
};
use crate::error::{Error, Result};
use crate::image::{Mask, RgbImage};
use crate::metrics::{MetricReport, Pairing};
use crate::optimize::{optimize_views_in, EditableSet, FitConfig, LrSchedule, OptimizeConfig, DEFAULT_LAMBDA};
use crate::prelude::*;
use crate::refine::face::{DEFAULT_FEATHER, DEFAULT_HULL_DILATION};
use crate::refine::sparse::{score_groups, with_retries, GroupScore, DEFAULT_RETRIES, DEFAULT_TAU};
use crate::refine::{
    face_composite, re_edit, restore_view, select_outlier_views, DegradationOp, DegradationSpec, FaceDetector, FaceNet,
    GarmentMask, ReEditInput, RestoreConfig, Segmenter,
};
use crate::render::{render_view, RenderSettings};
use crate::scene::{CameraView, GaussianCloud};

pub use probe::{circular_hue_variance, hue_probe, mean_chroma, HueProbe};
pub use track::track_editable_gaussians;

pub const DEFAULT_RHO: f64 = 0.6;
/// Pixels trimmed from region masks before measuring inside them.
pub const EVAL_EROSION: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Err,
    IterativeDu,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Err => "err",
            Strategy::IterativeDu => "iterative-du",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineConfig {
    pub face: bool,
    pub hull_dilation: usize,
    pub feather: usize,
    pub sparse: bool,
    pub tau: f64,
    pub retries: u32,
    pub restore: RestoreConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            face: true,
            hull_dilation: DEFAULT_HULL_DILATION,
            feather: DEFAULT_FEATHER,
            sparse: true,
            tau: DEFAULT_TAU,
            retries: DEFAULT_RETRIES,
            restore: RestoreConfig::default(),
        }
    }
}

fn default_rho() -> f64 {
    DEFAULT_RHO
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_probes() -> Vec<f64> {
    vec![0.5]
}

/// Full configuration of an editing run.
///
/// The garment image itself travels next to the job as a
/// [`GarmentPrompt`]; `prompt_image` only names where it was loaded from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditJob {
    pub strategy: Strategy,
    pub rounds: u32,
    pub optimize_iters_per_round: usize,
    pub editor: EditorBinding,
    #[serde(default)]
    pub prompt_image: String,
    pub target_region: TargetRegion,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default = "default_rho")]
    pub region_rho: f64,
    /// Recompute the editable set every round instead of only in round 1.
    #[serde(default)]
    pub retrack_each_round: bool,
    pub seed: u64,
    #[serde(default)]
    pub schedule: LrSchedule,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    /// Points of the run, as fractions of all optimizer steps, at which
    /// garment hue agreement is measured.
    #[serde(default = "default_probes")]
    pub probe_fractions: Vec<f64>,
}

impl EditJob {
    /// A job with default refinement and a mock editor.
    pub fn mock(strategy: Strategy, rounds: u32, iters: usize, jitter: f64, seed: u64) -> Self {
        Self {
            strategy,
            rounds,
            optimize_iters_per_round: iters,
            editor: EditorBinding::Mock {
                seed,
                jitter,
                sabotage: Vec::new(),
                sabotage_on_reedit: false,
            },
            prompt_image: String::new(),
            target_region: TargetRegion::Upper,
            refine: RefineConfig::default(),
            region_rho: DEFAULT_RHO,
            retrack_each_round: false,
            seed,
            schedule: LrSchedule::default(),
            lambda: DEFAULT_LAMBDA,
            probe_fractions: default_probes(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Precondition("an edit job needs at least one round".into()));
        }
        if !(self.region_rho > 0.0 && self.region_rho <= 1.0) {
            return Err(Error::invalid(format!("region rho {} must lie in (0, 1]", self.region_rho)));
        }
        if !(0.0..=1.0).contains(&self.refine.tau) {
            return Err(Error::invalid(format!("tau {} must lie in [0, 1]", self.refine.tau)));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::invalid(format!("lambda {} must lie in [0, 1]", self.lambda)));
        }
        if self.probe_fractions.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("probe fractions must lie in [0, 1]"));
        }
        if let DegradationSpec::Downsample { factor: 0 } = self.refine.restore.degradation {
            return Err(Error::invalid("downsample factor must be positive"));
        }
        self.editor.validate()
    }

    /// The mock editor described by the binding, if it is one.
    pub fn mock_editor(&self) -> Option<MockEditor> {
        match &self.editor {
            EditorBinding::Mock {
                jitter,
                sabotage,
                sabotage_on_reedit,
                ..
            } => Some(MockEditor {
                jitter: *jitter,
                sabotage: sabotage.iter().copied().collect(),
                sabotage_on_reedit: *sabotage_on_reedit,
            }),
            EditorBinding::Remote { .. } => None,
        }
    }

    fn fit_config(&self, round: u32) -> FitConfig {
        FitConfig {
            schedule: self.schedule,
            optimize: OptimizeConfig {
                lambda: self.lambda,
                settings: RenderSettings::default(),
            },
            batch: 1,
            seed: self.seed ^ ((round as u64) << 40),
        }
    }
}

/// The services a run talks to.
#[derive(Clone, Copy)]
pub struct Components<'a> {
    pub editor: &'a dyn Editor,
    pub face: &'a dyn FaceDetector,
    pub segmenter: &'a dyn Segmenter,
    pub aux: Option<&'a dyn AuxProvider>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u32,
    /// Pre-step loss of every optimizer step in the round.
    pub losses: Vec<f64>,
    pub flagged: Vec<u32>,
    pub re_edited: Vec<u32>,
    pub group_scores: Vec<GroupScore>,
    /// Views whose face was composited back.
    pub face_views: Vec<u32>,
    /// Pixels the editor changed outside its allowed region.
    pub clipped_pixels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditReport {
    pub strategy: Strategy,
    pub rounds: Vec<RoundReport>,
    pub editable: Vec<usize>,
    pub total_steps: usize,
    pub probes: Vec<HueProbe>,
    /// Number of events in the dataset's update log.
    pub log_events: usize,
    /// Final renders against the current dataset images and against the
    /// originals.
    pub final_metrics: Vec<MetricReport>,
    /// Settings overridden on the command line, for provenance.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
}

#[cfg(feature = "parallel")]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync + Send) -> Vec<R> {
    items.iter().map(f).collect()
}

/// A view after editing and face refinement.
struct Edited {
    view_index: u32,
    aux: AuxInputs,
    stage1: RgbImage,
    stage2: RgbImage,
    face: bool,
    clipped: usize,
}

fn edit_seed(job: &EditJob, round: u32) -> u64 {
    job.editor.seed() ^ (((round - 1) as u64) << 32)
}

/// Edits one view from its original and composites the face back.
fn edit_and_face(
    record: &ViewRecord,
    prompt: &GarmentPrompt,
    job: &EditJob,
    comps: &Components<'_>,
    round: u32,
) -> Result<Edited> {
    let v = record.view_index();
    let original = record.original();
    let aux = synthesize_aux_inputs(v, original, &record.annotations, job.target_region, comps.aux)?;
    let outcome = with_retries(job.refine.retries, |_| {
        edit_view(
            comps.editor,
            &EditRequest {
                view_index: v,
                image: original,
                prompt,
                aux: &aux,
                seed: edit_seed(job, round),
                pass: EditPass::Initial,
            },
        )
    })?;
    let mut face = false;
    let stage2 = if job.refine.face {
        match comps.face.detect(v, original)? {
            Some(k) if k.len() >= 3 => {
                let net = FaceNet::new(k, v, original.dims(), job.refine.hull_dilation, job.refine.feather)?;
                face = true;
                face_composite(original, &outcome.image, Some(&net), v)?
            }
            _ => outcome.image.clone(),
        }
    } else {
        outcome.image.clone()
    };
    Ok(Edited {
        view_index: v,
        aux,
        stage1: outcome.image,
        stage2,
        face,
        clipped: outcome.clipped_pixels,
    })
}

fn degradation(job: &EditJob, mask: &Mask) -> DegradationOp {
    match job.refine.restore.degradation {
        DegradationSpec::Identity => DegradationOp::Identity,
        DegradationSpec::GarmentMask => DegradationOp::Mask(mask.clone()),
        DegradationSpec::Downsample { factor } => DegradationOp::Downsample { factor },
    }
}

fn check_inputs(cloud: &GaussianCloud, dataset: &ViewDataset, job: &EditJob, prompt: &GarmentPrompt) -> Result<()> {
    job.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("dataset has no views".into()));
    }
    if cloud.is_empty() {
        return Err(Error::Precondition("scene has no Gaussians".into()));
    }
    if prompt.target_region() != job.target_region {
        return Err(Error::Precondition(format!(
            "prompt targets {}, job targets {}",
            prompt.target_region().as_str(),
            job.target_region.as_str()
        )));
    }
    Ok(())
}

/// Eroded garment masks of the originals, used by the hue probes.
fn probe_views(dataset: &ViewDataset, job: &EditJob, comps: &Components<'_>) -> Result<Vec<(CameraView, Mask)>> {
    if job.probe_fractions.is_empty() {
        return Ok(Vec::new());
    }
    dataset
        .records()
        .iter()
        .map(|r| {
            let m = comps.segmenter.segment(r.view_index(), r.original(), job.target_region)?;
            Ok((r.camera().clone(), m.erode(EVAL_EROSION)))
        })
        .collect()
}

/// Records hue probes at the scheduled steps.
struct Prober<'a> {
    views: &'a [(CameraView, Mask)],
    steps: Vec<usize>,
    probes: Vec<HueProbe>,
}

impl<'a> Prober<'a> {
    fn new(views: &'a [(CameraView, Mask)], fractions: &[f64], total: usize) -> Self {
        let mut steps: Vec<usize> = fractions
            .iter()
            .map(|f| crate::math::round(f * total as f64) as usize)
            .collect();
        steps.sort_unstable();
        steps.dedup();
        Self {
            views,
            steps,
            probes: Vec::new(),
        }
    }

    fn at(&mut self, step: usize, cloud: &GaussianCloud) -> Result<()> {
        if self.steps.binary_search(&step).is_ok() && !self.views.is_empty() {
            self.probes.push(hue_probe(cloud, self.views, step, &RenderSettings::default())?);
        }
        Ok(())
    }

    fn finish(mut self, total: usize, cloud: &GaussianCloud) -> Result<Vec<HueProbe>> {
        let late: Vec<usize> = self.steps.iter().copied().filter(|&s| s >= total).collect();
        for s in late {
            if !self.views.is_empty() {
                self.probes.push(hue_probe(cloud, self.views, s, &RenderSettings::default())?);
            }
        }
        Ok(self.probes)
    }
}

fn final_metrics(cloud: &GaussianCloud, dataset: &ViewDataset) -> Result<Vec<MetricReport>> {
    let renders = dataset
        .records()
        .iter()
        .map(|r| Ok(render_view(cloud, r.camera(), &RenderSettings::default())?.pixels))
        .collect::<Result<Vec<_>>>()?;
    let vs = |pairing, pick: &dyn Fn(&ViewRecord) -> &RgbImage| {
        let pairs: Vec<_> = dataset
            .records()
            .iter()
            .zip(&renders)
            .map(|(r, img)| (r.view_index(), img, pick(r)))
            .collect();
        MetricReport::compute("edit", pairing, &pairs)
    };
    Ok(vec![
        vs(Pairing::RenderVsEdited, &|r| r.current())?,
        vs(Pairing::RenderVsOriginal, &|r| r.original())?,
    ])
}

fn split_failures(results: Vec<Result<Edited>>, round: u32) -> Result<Vec<Edited>> {
    let mut out = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(e) => out.push(e),
            Err(Error::EditorUnavailable { view_index, reason }) => failures.push((view_index, reason)),
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        return Err(Error::RoundAborted { round, failures });
    }
    Ok(out)
}

/// Edit, recall, reconstruct: every round edits and refines all views,
/// commits them in one transaction, then optimizes the editable Gaussians.
///
/// A round whose editor keeps failing is aborted before anything is
/// committed.
pub fn run_err(
    cloud: &GaussianCloud,
    dataset: &mut ViewDataset,
    job: &EditJob,
    prompt: &GarmentPrompt,
    comps: &Components<'_>,
) -> Result<(GaussianCloud, EditReport)> {
    check_inputs(cloud, dataset, job, prompt)?;
    let mut cloud = cloud.clone();
    let iters = job.optimize_iters_per_round;
    let total = job.rounds as usize * iters;
    let probe_views = probe_views(dataset, job, comps)?;
    let mut prober = Prober::new(&probe_views, &job.probe_fractions, total);
    let mut editable = EditableSet::none(cloud.len());
    let mut rounds = Vec::new();

    for r in 1..=job.rounds {
        let round = dataset.round() + 1;
        let edited = par_map(dataset.records(), |rec| edit_and_face(rec, prompt, job, comps, round));
        let edited = split_failures(edited, round)?;

        let masks = edited
            .iter()
            .map(|e| comps.segmenter.segment(e.view_index, &e.stage2, job.target_region))
            .collect::<Result<Vec<_>>>()?;
        let mut report = RoundReport {
            round,
            losses: Vec::new(),
            flagged: Vec::new(),
            re_edited: Vec::new(),
            group_scores: Vec::new(),
            face_views: edited.iter().filter(|e| e.face).map(|e| e.view_index).collect(),
            clipped_pixels: edited.iter().map(|e| e.clipped).sum(),
        };

        let mut stage3: Vec<RgbImage> = edited.iter().map(|e| e.stage2.clone()).collect();
        if job.refine.sparse {
            let gms = edited
                .iter()
                .zip(&masks)
                .map(|(e, m)| GarmentMask::new(&e.stage2, m.clone(), e.view_index))
                .collect::<Result<Vec<_>>>()?;
            report.group_scores = score_groups(&gms);
            report.flagged = select_outlier_views(&gms, job.refine.tau);
            let inputs: Vec<ReEditInput<'_>> = edited
                .iter()
                .filter(|e| report.flagged.contains(&e.view_index))
                .map(|e| ReEditInput {
                    view_index: e.view_index,
                    image: &e.stage2,
                    aux: &e.aux,
                })
                .collect();
            let redone = re_edit(comps.editor, &inputs, prompt, job.editor.seed(), round, job.refine.retries)?;
            for (v, img) in redone {
                let i = edited.iter().position(|e| e.view_index == v).expect("flagged view exists");
                stage3[i] = img;
                report.re_edited.push(v);
            }
        }

        let prior = job.refine.restore.prior.restorer();
        let stage4 = stage3
            .iter()
            .zip(&masks)
            .map(|(img, m)| restore_view(img, &degradation(job, m), prior.as_ref()))
            .collect::<Result<Vec<_>>>()?;

        let mut batch = Vec::with_capacity(edited.len() * 4);
        for ((e, s3), s4) in edited.into_iter().zip(stage3).zip(stage4) {
            let v = e.view_index;
            batch.push((v, EditStage::Stage1, e.stage1));
            batch.push((v, EditStage::Stage2, e.stage2));
            batch.push((v, EditStage::Stage3, s3));
            batch.push((v, EditStage::Stage4, s4));
        }
        let opened = dataset.begin_round();
        debug_assert_eq!(opened, round);
        dataset.commit_batch(batch)?;

        if r == 1 || job.retrack_each_round {
            let views: Vec<(CameraView, Mask)> = dataset
                .records()
                .iter()
                .zip(masks)
                .map(|(rec, m)| (rec.camera().clone(), m))
                .collect();
            editable = track_editable_gaussians(&cloud, &views, job.region_rho);
        }

        let targets = dataset.snapshot_targets();
        let losses = optimize_views_in(
            &mut cloud,
            &targets,
            iters,
            &editable,
            &job.fit_config(round),
            (r as usize - 1) * iters,
            total,
            |step, c| prober.at(step, c),
        )?;
        dataset.record_optimize(iters as u64);
        report.losses = losses.iter().map(|l| l.total).collect();
        rounds.push(report);
    }

    let probes = prober.finish(total, &cloud)?;
    let final_metrics = final_metrics(&cloud, dataset)?;
    Ok((
        cloud,
        EditReport {
            strategy: Strategy::Err,
            rounds,
            editable: editable.indices().collect(),
            total_steps: total,
            probes,
            log_events: dataset.update_log().len(),
            final_metrics,
            overrides: BTreeMap::new(),
        },
    ))
}

/// Iterative dataset update: views are edited, refined and committed one
/// at a time, each followed by `max(1, iters / views)` optimizer steps.
///
/// Outlier selection looks at the current view and the two before it and
/// re-edits only the current one. The editable set comes from segmenting
/// the originals up front, since no round-wide segmentation exists.
pub fn run_iterative_du(
    cloud: &GaussianCloud,
    dataset: &mut ViewDataset,
    job: &EditJob,
    prompt: &GarmentPrompt,
    comps: &Components<'_>,
) -> Result<(GaussianCloud, EditReport)> {
    check_inputs(cloud, dataset, job, prompt)?;
    let mut cloud = cloud.clone();
    let n_views = dataset.len();
    let k = (job.optimize_iters_per_round / n_views).max(1);
    let total = job.rounds as usize * n_views * k;
    let probe_views = probe_views(dataset, job, comps)?;
    let mut prober = Prober::new(&probe_views, &job.probe_fractions, total);
    let prior = job.refine.restore.prior.restorer();
    let mut editable = EditableSet::none(cloud.len());
    let mut rounds = Vec::new();
    let mut step = 0usize;

    for r in 1..=job.rounds {
        if r == 1 || job.retrack_each_round {
            let views = dataset
                .records()
                .iter()
                .map(|rec| {
                    let m = comps.segmenter.segment(rec.view_index(), rec.current(), job.target_region)?;
                    Ok((rec.camera().clone(), m))
                })
                .collect::<Result<Vec<_>>>()?;
            editable = track_editable_gaussians(&cloud, &views, job.region_rho);
        }
        let round = dataset.begin_round();
        let mut report = RoundReport {
            round,
            losses: Vec::new(),
            flagged: Vec::new(),
            re_edited: Vec::new(),
            group_scores: Vec::new(),
            face_views: Vec::new(),
            clipped_pixels: 0,
        };
        let mut recent: Vec<GarmentMask> = Vec::new();

        for i in 0..n_views {
            let rec = &dataset.records()[i];
            let e = edit_and_face(rec, prompt, job, comps, round).map_err(|err| match err {
                Error::EditorUnavailable { view_index, reason } => Error::RoundAborted {
                    round,
                    failures: vec![(view_index, reason)],
                },
                other => other,
            })?;
            let v = e.view_index;
            if e.face {
                report.face_views.push(v);
            }
            report.clipped_pixels += e.clipped;
            let mask = comps.segmenter.segment(v, &e.stage2, job.target_region)?;

            let mut stage3 = e.stage2.clone();
            if job.refine.sparse {
                recent.push(GarmentMask::new(&e.stage2, mask.clone(), v)?);
                if recent.len() > 3 {
                    recent.remove(0);
                }
                if recent.len() == 3 {
                    report.group_scores.extend(score_groups(&recent));
                    if select_outlier_views(&recent, job.refine.tau).contains(&v) {
                        report.flagged.push(v);
                        let input = ReEditInput {
                            view_index: v,
                            image: &e.stage2,
                            aux: &e.aux,
                        };
                        let redone =
                            re_edit(comps.editor, &[input], prompt, job.editor.seed(), round, job.refine.retries)?;
                        stage3 = redone.into_iter().next().expect("one input, one output").1;
                        report.re_edited.push(v);
                    }
                }
            }
            let stage4 = restore_view(&stage3, &degradation(job, &mask), prior.as_ref())?;

            dataset.commit_stage(v, EditStage::Stage1, e.stage1)?;
            dataset.commit_stage(v, EditStage::Stage2, e.stage2)?;
            dataset.commit_stage(v, EditStage::Stage3, stage3)?;
            dataset.commit_stage(v, EditStage::Stage4, stage4)?;

            let targets = dataset.snapshot_targets();
            let losses = optimize_views_in(
                &mut cloud,
                &targets,
                k,
                &editable,
                &job.fit_config(round ^ ((i as u32) << 8)),
                step,
                total,
                |s, c| prober.at(s, c),
            )?;
            dataset.record_optimize(k as u64);
            step += k;
            report.losses.extend(losses.iter().map(|l| l.total));
        }
        rounds.push(report);
    }

    let probes = prober.finish(total, &cloud)?;
    let final_metrics = final_metrics(&cloud, dataset)?;
    Ok((
        cloud,
        EditReport {
            strategy: Strategy::IterativeDu,
            rounds,
            editable: editable.indices().collect(),
            total_steps: total,
            probes,
            log_events: dataset.update_log().len(),
            final_metrics,
            overrides: BTreeMap::new(),
        },
    ))
}

/// Runs the job's strategy.
pub fn run_job(
    cloud: &GaussianCloud,
    dataset: &mut ViewDataset,
    job: &EditJob,
    prompt: &GarmentPrompt,
    comps: &Components<'_>,
) -> Result<(GaussianCloud, EditReport)> {
    match job.strategy {
        Strategy::Err => run_err(cloud, dataset, job, prompt, comps),
        Strategy::IterativeDu => run_iterative_du(cloud, dataset, job, prompt, comps),
    }
}
