//! PSNR and SSIM, plus the serializable metric report.
//!
//! SSIM is computed on Rec.601 luma with an 11×11 Gaussian window
//! (σ = 1.5), `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, over the valid
//! region (windows fully inside the image), averaged.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math;
use crate::prelude::*;
use crate::RgbImage;

pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

const C1: f64 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
const C2: f64 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);

fn mse(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    let mut acc = math::CompensatedSum::default();
    for (p, q) in a.pixels().iter().zip(b.pixels()) {
        for ch in 0..3 {
            let d = p[ch] - q[ch];
            acc.add(d * d);
        }
    }
    Ok(acc.value() / (3 * a.width() * a.height()) as f64)
}

/// Peak signal-to-noise ratio for unit-range images, capped at 99 dB.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * math::log10(1.0 / m)).min(PSNR_CAP_DB))
}

/// PSNR restricted to the pixels where `region` is set.
pub fn psnr_in(a: &RgbImage, b: &RgbImage, region: &crate::Mask) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    a.ensure_same_dims(region.dims())?;
    let mut acc = math::CompensatedSum::default();
    let mut n = 0usize;
    for ((p, q), &m) in a.pixels().iter().zip(b.pixels()).zip(region.bits()) {
        if m {
            for ch in 0..3 {
                let d = p[ch] - q[ch];
                acc.add(d * d);
            }
            n += 3;
        }
    }
    if n == 0 {
        return Err(Error::invalid("empty PSNR region"));
    }
    let m = acc.value() / n as f64;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * math::log10(1.0 / m)).min(PSNR_CAP_DB))
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - c;
            math::exp(-(d * d) / (2.0 * sigma * sigma))
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Window size actually used for an image: 11, or the largest odd size
/// that fits.
pub fn effective_window(width: usize, height: usize) -> usize {
    let m = width.min(height).min(SSIM_WINDOW);
    if m % 2 == 0 {
        m.saturating_sub(1).max(1)
    } else {
        m
    }
}

/// Valid-mode separable filtering of a plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut horiz = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            let row = &plane[y * width + x..y * width + x + k];
            horiz[y * ow + x] = row.iter().zip(taps).map(|(v, t)| v * t).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += horiz[(y + i) * ow + x] * t;
            }
            out[y * ow + x] = acc;
        }
    }
    out
}

/// Adjoint of `filter_valid`: scatters a valid-size map back to full size.
fn filter_adjoint(map: &[f64], width: usize, height: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (ow, oh) = (width + 1 - k, height + 1 - k);
    let mut vert = vec![0.0; ow * height];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                vert[(y + i) * ow + x] += v * t;
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = vert[y * ow + x];
            for (i, t) in taps.iter().enumerate() {
                out[y * width + x + i] += v * t;
            }
        }
    }
    out
}

struct SsimStats {
    taps: Vec<f64>,
    mu_a: Vec<f64>,
    mu_b: Vec<f64>,
    e_aa: Vec<f64>,
    e_bb: Vec<f64>,
    e_ab: Vec<f64>,
}

fn ssim_stats(a: &[f64], b: &[f64], width: usize, height: usize) -> SsimStats {
    let win = effective_window(width, height);
    if win < SSIM_WINDOW {
        log::warn!("image {width}x{height} is smaller than the SSIM window; using {win}x{win}");
    }
    let taps = gaussian_taps(win, SSIM_SIGMA);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    SsimStats {
        mu_a: filter_valid(a, width, height, &taps),
        mu_b: filter_valid(b, width, height, &taps),
        e_aa: filter_valid(&aa, width, height, &taps),
        e_bb: filter_valid(&bb, width, height, &taps),
        e_ab: filter_valid(&ab, width, height, &taps),
        taps,
    }
}

/// Mean SSIM of two scalar planes.
pub fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize) -> f64 {
    let s = ssim_stats(a, b, width, height);
    let mut acc = math::CompensatedSum::default();
    for i in 0..s.mu_a.len() {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let var_a = s.e_aa[i] - ma * ma;
        let var_b = s.e_bb[i] - mb * mb;
        let cov = s.e_ab[i] - ma * mb;
        acc.add(((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (var_a + var_b + C2)));
    }
    acc.value() / s.mu_a.len() as f64
}

/// Mean SSIM of two planes and its gradient with respect to `a`.
pub fn ssim_plane_grad(a: &[f64], b: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
    let s = ssim_stats(a, b, width, height);
    let n = s.mu_a.len();
    let inv_n = 1.0 / n as f64;
    let mut acc = math::CompensatedSum::default();
    let mut d_mu = vec![0.0; n];
    let mut d_eaa = vec![0.0; n];
    let mut d_eab = vec![0.0; n];
    for i in 0..n {
        let (ma, mb) = (s.mu_a[i], s.mu_b[i]);
        let a1 = 2.0 * ma * mb + C1;
        let a2 = 2.0 * (s.e_ab[i] - ma * mb) + C2;
        let b1 = ma * ma + mb * mb + C1;
        let b2 = (s.e_aa[i] - ma * ma) + (s.e_bb[i] - mb * mb) + C2;
        let den = b1 * b2;
        let val = a1 * a2 / den;
        acc.add(val);
        // ∂/∂μa of A1·A2/(B1·B2) with ∂A1 = 2μb, ∂A2 = −2μb, ∂B1 = 2μa, ∂B2 = −2μa.
        d_mu[i] = inv_n * ((2.0 * mb * a2 - 2.0 * mb * a1) / den - val * (2.0 * ma / b1 - 2.0 * ma / b2));
        d_eaa[i] = inv_n * (-val / b2);
        d_eab[i] = inv_n * (2.0 * a1 / den);
    }
    let sa = filter_adjoint(&d_mu, width, height, &s.taps);
    let se2 = filter_adjoint(&d_eaa, width, height, &s.taps);
    let seab = filter_adjoint(&d_eab, width, height, &s.taps);
    let grad = (0..a.len()).map(|q| sa[q] + 2.0 * a[q] * se2[q] + b[q] * seab[q]).collect();
    (acc.value() * inv_n, grad)
}

/// Structural similarity of two RGB images, computed on luma.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    a.ensure_same_dims(b.dims())?;
    if a.width() == 0 || a.height() == 0 {
        return Err(Error::invalid("empty image"));
    }
    Ok(ssim_plane(&a.luma_plane(), &b.luma_plane(), a.width(), a.height()))
}

/// Which image pair a metric row compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    EditedVsOriginal,
    RenderVsEdited,
    RenderVsOriginal,
    RenderVsRender,
}

impl Pairing {
    pub fn as_str(self) -> &'static str {
        match self {
            Pairing::EditedVsOriginal => "edited_vs_original",
            Pairing::RenderVsEdited => "render_vs_edited",
            Pairing::RenderVsOriginal => "render_vs_original",
            Pairing::RenderVsRender => "render_vs_render",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewMetric {
    pub view_index: u32,
    pub psnr: f64,
    pub ssim: f64,
}

/// Pixel metrics for a set of view pairs. Slots for network-based metrics
/// stay empty unless merged in from an external tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_id: String,
    pub pairing: Pairing,
    pub views: Vec<ViewMetric>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub fid: Option<f64>,
    pub lpips: Option<f64>,
    pub clip_text_image: Option<f64>,
    pub clip_image_image: Option<f64>,
}

impl MetricReport {
    pub fn compute(
        dataset_id: impl Into<String>,
        pairing: Pairing,
        pairs: &[(u32, &RgbImage, &RgbImage)],
    ) -> Result<Self> {
        let mut views = Vec::with_capacity(pairs.len());
        for &(view_index, a, b) in pairs {
            views.push(ViewMetric {
                view_index,
                psnr: psnr(a, b)?,
                ssim: ssim(a, b)?,
            });
        }
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        Ok(Self {
            dataset_id: dataset_id.into(),
            pairing,
            views,
            mean_psnr,
            mean_ssim,
            fid: None,
            lpips: None,
            clip_text_image: None,
            clip_image_image: None,
        })
    }

    /// One row per view plus a mean row; empty cells for absent slots.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut out = String::from("dataset,pairing,view,psnr,ssim,fid,lpips,clip_text_image,clip_image_image\n");
        let pairing = self.pairing.as_str();
        for v in &self.views {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},,,,\n",
                self.dataset_id, pairing, v.view_index, v.psnr, v.ssim
            ));
        }
        out.push_str(&format!(
            "{},{},mean,{:.6},{:.6},{},{},{},{}\n",
            self.dataset_id,
            pairing,
            self.mean_psnr,
            self.mean_ssim,
            opt(self.fid),
            opt(self.lpips),
            opt(self.clip_text_image),
            opt(self.clip_image_image)
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, f: impl Fn(usize, usize) -> f64) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = f(x, y);
            [v, v, v]
        })
    }

    #[test]
    fn psnr_closed_forms() {
        let a = img(8, 8, |x, y| ((x + y) % 3) as f64 * 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
        let b = a.map(|p| [p[0] + 0.1, p[1] + 0.1, p[2] + 0.1]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_is_exactly_one() {
        let a = img(20, 17, |x, y| ((x * 7 + y * 3) % 11) as f64 / 10.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_of_binary_negative_is_negative() {
        let a = img(16, 16, |x, y| ((x / 2 + y / 3) % 2) as f64);
        let b = a.map(|p| [1.0 - p[0], 1.0 - p[1], 1.0 - p[2]]);
        assert!(ssim(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn small_images_shrink_the_window() {
        assert_eq!(effective_window(8, 30), 7);
        let a = img(8, 8, |x, _| x as f64 / 8.0);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn adjoint_is_transpose() {
        let (w, h) = (14, 13);
        let taps = gaussian_taps(5, 1.5);
        let x: Vec<f64> = (0..w * h).map(|i| ((i * 37) % 17) as f64 / 17.0).collect();
        let ymap: Vec<f64> = (0..(w - 4) * (h - 4)).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        let fx = filter_valid(&x, w, h, &taps);
        let aty = filter_adjoint(&ymap, w, h, &taps);
        let lhs: f64 = fx.iter().zip(&ymap).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let (w, h) = (14, 12);
        let a: Vec<f64> = (0..w * h).map(|i| (((i * 31) % 23) as f64) / 23.0).collect();
        let b: Vec<f64> = (0..w * h).map(|i| (((i * 17) % 19) as f64) / 19.0).collect();
        let (_, g) = ssim_plane_grad(&a, &b, w, h);
        let hstep = 1e-6;
        for q in [0, 5, 40, 77, w * h - 1] {
            let mut p = a.clone();
            p[q] += hstep;
            let mut m = a.clone();
            m[q] -= hstep;
            let fd = (ssim_plane(&p, &b, w, h) - ssim_plane(&m, &b, w, h)) / (2.0 * hstep);
            assert!((fd - g[q]).abs() < 1e-7, "{q}: {fd} vs {}", g[q]);
        }
    }
}
