//! Reconstruction loss and gradient-descent optimization of a cloud.
//!
//! The update is plain gradient descent with no optimizer state, so
//! Gaussians outside the editable set are never touched. Each Gaussian's
//! gradient is divided by its blending footprint in the sampled views
//! (a diagonal preconditioner); one learning rate per parameter group then
//! works for splats of any screen size. Rates decay exponentially over a
//! run.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::ViewDataset;
use crate::error::{Error, Result};
use crate::math;
use crate::metrics;
use crate::prelude::*;
use crate::render::grad::{backward, CloudGradient};
use crate::render::{render_view, RenderSettings, RenderedImage};
use crate::scene::{CameraView, GaussianCloud};
use crate::RgbImage;

pub const DEFAULT_LAMBDA: f64 = 0.2;

/// Euclidean norms of the loss gradient per parameter group.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct GradNorms {
    pub position: f64,
    pub rotation: f64,
    pub scale: f64,
    pub opacity: f64,
    pub color: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l1: f64,
    pub dssim: f64,
    pub total: f64,
    pub grad_norms: GradNorms,
    /// Parameter groups whose update was skipped for a non-finite gradient,
    /// as `(gaussian index, group name)`.
    pub skipped: Vec<(usize, String)>,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("loss weight {lambda} outside [0, 1]")));
    }
    Ok(())
}

/// `(1−λ)·L1 + λ·(1−SSIM)/2` between a render and its target.
pub fn reconstruction_loss(rendered: &RenderedImage, target: &RgbImage, lambda: f64) -> Result<LossReport> {
    check_lambda(lambda)?;
    let (l1, dssim, _) = loss_terms(&rendered.pixels, target, lambda, false)?;
    Ok(LossReport {
        l1,
        dssim,
        total: (1.0 - lambda) * l1 + lambda * dssim,
        grad_norms: GradNorms::default(),
        skipped: Vec::new(),
    })
}

/// Loss terms and, when asked, the gradient of the total per pixel.
fn loss_terms(
    image: &RgbImage,
    target: &RgbImage,
    lambda: f64,
    want_grad: bool,
) -> Result<(f64, f64, Vec<[f64; 3]>)> {
    image.ensure_same_dims(target.dims())?;
    let (w, h) = image.dims();
    if w == 0 || h == 0 {
        return Err(Error::invalid("empty image"));
    }
    let n = (3 * w * h) as f64;
    let mut l1 = math::CompensatedSum::default();
    for (p, q) in image.pixels().iter().zip(target.pixels()) {
        for ch in 0..3 {
            l1.add((p[ch] - q[ch]).abs());
        }
    }
    let l1 = l1.value() / n;
    let (a, b) = (image.luma_plane(), target.luma_plane());
    if !want_grad {
        let dssim = (1.0 - metrics::ssim_plane(&a, &b, w, h)) / 2.0;
        return Ok((l1, dssim, Vec::new()));
    }
    let (s, ds) = metrics::ssim_plane_grad(&a, &b, w, h);
    let dssim = (1.0 - s) / 2.0;
    let grad = image
        .pixels()
        .iter()
        .zip(target.pixels())
        .zip(&ds)
        .map(|((p, q), &dl)| {
            let mut g = [0.0; 3];
            for ch in 0..3 {
                let d = p[ch] - q[ch];
                let sign = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                g[ch] = (1.0 - lambda) * sign / n - lambda * 0.5 * dl * crate::image::LUMA_WEIGHTS[ch];
            }
            g
        })
        .collect();
    Ok((l1, dssim, grad))
}

/// Loss of one view and its gradient with respect to every Gaussian.
pub fn loss_gradient(
    cloud: &GaussianCloud,
    cam: &CameraView,
    target: &RgbImage,
    settings: &RenderSettings,
    lambda: f64,
) -> Result<(LossReport, CloudGradient)> {
    check_lambda(lambda)?;
    let rendered = render_view(cloud, cam, settings)?;
    let (l1, dssim, d_pixels) = loss_terms(&rendered.pixels, target, lambda, true)?;
    let grad = backward(cloud, cam, settings, &d_pixels)?;
    let report = LossReport {
        l1,
        dssim,
        total: (1.0 - lambda) * l1 + lambda * dssim,
        grad_norms: grad_norms(&grad),
        skipped: Vec::new(),
    };
    Ok((report, grad))
}

fn grad_norms(grad: &CloudGradient) -> GradNorms {
    let mut sq = [0.0f64; 5];
    for g in &grad.grads {
        sq[0] += g.position.iter().map(|v| v * v).sum::<f64>();
        sq[1] += g.rotation.iter().map(|v| v * v).sum::<f64>();
        sq[2] += g.scale.iter().map(|v| v * v).sum::<f64>();
        sq[3] += g.opacity * g.opacity;
        sq[4] += g.sh.iter().flatten().map(|v| v * v).sum::<f64>();
    }
    GradNorms {
        position: math::sqrt(sq[0]),
        rotation: math::sqrt(sq[1]),
        scale: math::sqrt(sq[2]),
        opacity: math::sqrt(sq[3]),
        color: math::sqrt(sq[4]),
    }
}

/// Per-group step sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LearningRates {
    pub position: f64,
    pub color: f64,
    pub opacity: f64,
    pub rotation: f64,
    pub scale: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            color: 0.5,
            opacity: 5e-2,
            rotation: 0.0,
            scale: 0.0,
        }
    }
}

impl LearningRates {
    pub fn scaled(&self, f: f64) -> Self {
        Self {
            position: self.position * f,
            color: self.color * f,
            opacity: self.opacity * f,
            rotation: self.rotation * f,
            scale: self.scale * f,
        }
    }

    fn validate(&self) -> Result<()> {
        for v in [self.position, self.color, self.opacity, self.rotation, self.scale] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("learning rate {v} must be finite and non-negative")));
            }
        }
        Ok(())
    }
}

/// Exponential decay from `base` to `base · final_fraction` over a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: LearningRates,
    pub final_fraction: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: LearningRates::default(),
            final_fraction: 0.02,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, step: usize, total: usize) -> LearningRates {
        if total <= 1 {
            return self.base;
        }
        let t = step.min(total - 1) as f64 / (total - 1) as f64;
        self.base.scaled(math::powf(self.final_fraction, t))
    }
}

/// Which Gaussians an optimization step may change.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditableSet {
    flags: Vec<bool>,
}

impl EditableSet {
    pub fn all(len: usize) -> Self {
        Self { flags: vec![true; len] }
    }

    pub fn none(len: usize) -> Self {
        Self { flags: vec![false; len] }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut flags = vec![false; len];
        for i in indices {
            *flags
                .get_mut(i)
                .ok_or_else(|| Error::invalid(format!("editable index {i} out of range {len}")))? = true;
        }
        Ok(Self { flags })
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn contains(&self, i: usize) -> bool {
        self.flags.get(i).copied().unwrap_or(false)
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.flags.iter().enumerate().filter(|(_, &f)| f).map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizeConfig {
    pub lambda: f64,
    pub settings: RenderSettings,
}

impl Default for OptimizeConfig {
    fn default() -> Self {
        Self {
            lambda: DEFAULT_LAMBDA,
            settings: RenderSettings::default(),
        }
    }
}

fn all_finite(v: &[f64]) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// One gradient step over `targets`, changing only Gaussians in `editable`.
///
/// The returned report describes the loss before the step.
pub fn optimize_step(
    cloud: &mut GaussianCloud,
    targets: &[(&CameraView, &RgbImage)],
    lr: &LearningRates,
    editable: &EditableSet,
    cfg: &OptimizeConfig,
) -> Result<LossReport> {
    lr.validate()?;
    if editable.len() != cloud.len() {
        return Err(Error::invalid(format!(
            "editable set covers {} Gaussians, cloud has {}",
            editable.len(),
            cloud.len()
        )));
    }
    if targets.is_empty() {
        return Err(Error::Precondition("optimize_step needs at least one view".into()));
    }
    let mut total = CloudGradient::zero(cloud);
    let (mut l1, mut dssim) = (0.0, 0.0);
    // Gradients are of the per-view mean loss; scaling by the channel count
    // makes a pixel's residual enter with weight ~1 before preconditioning.
    let mut norms = GradNorms::default();
    for (cam, target) in targets {
        let (rep, mut g) = loss_gradient(cloud, cam, target, &cfg.settings, cfg.lambda)?;
        l1 += rep.l1;
        dssim += rep.dssim;
        norms.position += rep.grad_norms.position;
        norms.rotation += rep.grad_norms.rotation;
        norms.scale += rep.grad_norms.scale;
        norms.opacity += rep.grad_norms.opacity;
        norms.color += rep.grad_norms.color;
        let s = (3 * cam.width * cam.height) as f64;
        for gg in &mut g.grads {
            for v in gg.position.iter_mut().chain(gg.rotation.iter_mut()).chain(gg.scale.iter_mut()) {
                *v *= s;
            }
            gg.opacity *= s;
            for c in gg.sh.iter_mut().flatten() {
                *c *= s;
            }
        }
        total.accumulate(&g);
    }
    let nv = targets.len() as f64;
    norms.position /= nv;
    norms.rotation /= nv;
    norms.scale /= nv;
    norms.opacity /= nv;
    norms.color /= nv;

    let mut skipped = Vec::new();
    for i in editable.indices() {
        let g = &total.grads[i];
        let k = 1.0 / (total.footprint[i] + 1.0);
        let gauss = cloud.get_mut(i).expect("index checked against cloud length");

        if lr.position > 0.0 {
            if all_finite(&g.position) {
                let p = gauss.position();
                gauss.set_position([
                    p[0] - lr.position * k * g.position[0],
                    p[1] - lr.position * k * g.position[1],
                    p[2] - lr.position * k * g.position[2],
                ]);
            } else {
                skipped.push((i, "position".to_string()));
            }
        }
        if lr.color > 0.0 {
            if g.sh.iter().all(|c| all_finite(c)) {
                for (j, c) in g.sh.iter().enumerate() {
                    let cur = gauss.sh()[j];
                    gauss.set_sh_coeff(
                        j,
                        [
                            cur[0] - lr.color * k * c[0],
                            cur[1] - lr.color * k * c[1],
                            cur[2] - lr.color * k * c[2],
                        ],
                    );
                }
            } else {
                skipped.push((i, "color".to_string()));
            }
        }
        if lr.opacity > 0.0 {
            if g.opacity.is_finite() {
                gauss.set_opacity((gauss.opacity() - lr.opacity * k * g.opacity).clamp(0.0, 1.0));
            } else {
                skipped.push((i, "opacity".to_string()));
            }
        }
        if lr.rotation > 0.0 {
            if all_finite(&g.rotation) {
                let q = gauss.rotation().0;
                gauss.set_rotation([
                    q[0] - lr.rotation * k * g.rotation[0],
                    q[1] - lr.rotation * k * g.rotation[1],
                    q[2] - lr.rotation * k * g.rotation[2],
                    q[3] - lr.rotation * k * g.rotation[3],
                ]);
            } else {
                skipped.push((i, "rotation".to_string()));
            }
        }
        if lr.scale > 0.0 {
            if all_finite(&g.scale) {
                let s = gauss.scale();
                let mut ns = [0.0; 3];
                for a in 0..3 {
                    ns[a] = (s[a] - lr.scale * k * g.scale[a]).max(s[a] * 0.5);
                }
                gauss.set_scale(ns);
            } else {
                skipped.push((i, "scale".to_string()));
            }
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} non-finite parameter updates", skipped.len());
    }
    let (l1, dssim) = (l1 / nv, dssim / nv);
    Ok(LossReport {
        l1,
        dssim,
        total: (1.0 - cfg.lambda) * l1 + cfg.lambda * dssim,
        grad_norms: norms,
        skipped,
    })
}

/// Settings for a run of optimization steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub schedule: LrSchedule,
    pub optimize: OptimizeConfig,
    /// Views per step.
    pub batch: usize,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            schedule: LrSchedule::default(),
            optimize: OptimizeConfig::default(),
            batch: 1,
            seed: 0,
        }
    }
}

/// Loss trajectory of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub initial_mean_loss: f64,
    pub final_mean_loss: f64,
    /// Pre-step loss of every step.
    pub step_losses: Vec<f64>,
    pub skipped_updates: usize,
}

/// Mean loss of `cloud` over all targets.
pub fn mean_loss(cloud: &GaussianCloud, targets: &[(CameraView, RgbImage)], cfg: &OptimizeConfig) -> Result<f64> {
    let mut acc = 0.0;
    for (cam, img) in targets {
        let r = render_view(cloud, cam, &cfg.settings)?;
        acc += reconstruction_loss(&r, img, cfg.lambda)?.total;
    }
    Ok(acc / targets.len().max(1) as f64)
}

/// Runs `iterations` steps over views drawn in shuffled epochs.
///
/// `on_step(step, cloud)` runs before each step, which lets callers probe
/// intermediate states.
pub fn optimize_views(
    cloud: &mut GaussianCloud,
    targets: &[(CameraView, RgbImage)],
    iterations: usize,
    editable: &EditableSet,
    cfg: &FitConfig,
    on_step: impl FnMut(usize, &GaussianCloud) -> Result<()>,
) -> Result<Vec<LossReport>> {
    optimize_views_in(cloud, targets, iterations, editable, cfg, 0, iterations, on_step)
}

/// Like [`optimize_views`], for a slice of a longer run: the learning rate
/// follows the schedule of a `total`-step run starting at step `offset`,
/// and `on_step` receives run-global step numbers.
#[allow(clippy::too_many_arguments)]
pub fn optimize_views_in(
    cloud: &mut GaussianCloud,
    targets: &[(CameraView, RgbImage)],
    iterations: usize,
    editable: &EditableSet,
    cfg: &FitConfig,
    offset: usize,
    total: usize,
    mut on_step: impl FnMut(usize, &GaussianCloud) -> Result<()>,
) -> Result<Vec<LossReport>> {
    if targets.is_empty() {
        return Err(Error::Precondition("no target views".into()));
    }
    let batch = cfg.batch.clamp(1, targets.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut reports = Vec::with_capacity(iterations);
    for step in 0..iterations {
        on_step(offset + step, cloud)?;
        let mut picked = Vec::with_capacity(batch);
        while picked.len() < batch {
            if order.is_empty() {
                order = (0..targets.len()).collect();
                order.shuffle(&mut rng);
            }
            picked.push(order.pop().expect("refilled above"));
        }
        let views: Vec<(&CameraView, &RgbImage)> = picked.iter().map(|&i| (&targets[i].0, &targets[i].1)).collect();
        let lr = cfg.schedule.at(offset + step, total.max(offset + iterations));
        reports.push(optimize_step(cloud, &views, &lr, editable, &cfg.optimize)?);
    }
    Ok(reports)
}

/// Fits every Gaussian of `init` to the dataset's current images.
pub fn fit_scene(
    dataset: &ViewDataset,
    init: GaussianCloud,
    iterations: usize,
    cfg: &FitConfig,
) -> Result<(GaussianCloud, FitReport)> {
    if dataset.len() < 2 {
        return Err(Error::Precondition(format!(
            "fitting needs at least 2 views, dataset has {}",
            dataset.len()
        )));
    }
    let targets = dataset.snapshot_targets();
    let mut cloud = init;
    let initial = mean_loss(&cloud, &targets, &cfg.optimize)?;
    let editable = EditableSet::all(cloud.len());
    let reports = optimize_views(&mut cloud, &targets, iterations, &editable, cfg, |_, _| Ok(()))?;
    let final_loss = mean_loss(&cloud, &targets, &cfg.optimize)?;
    if final_loss > initial + 1e-6 {
        log::warn!("fit ended above its starting loss ({final_loss} > {initial})");
    }
    Ok((
        cloud,
        FitReport {
            initial_mean_loss: initial,
            final_mean_loss: final_loss,
            step_losses: reports.iter().map(|r| r.total).collect(),
            skipped_updates: reports.iter().map(|r| r.skipped.len()).sum(),
        },
    ))
}
