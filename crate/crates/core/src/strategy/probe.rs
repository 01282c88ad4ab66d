use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::{rgb_to_ycbcr, Mask, RgbImage};
use crate::math;
use crate::prelude::*;
use crate::render::{render_view, RenderSettings};
use crate::scene::{CameraView, GaussianCloud};

/// Garment hue agreement across views at one optimizer step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HueProbe {
    pub step: usize,
    /// Circular variance of the per-view garment hue, in `[0, 1]`.
    pub hue_variance: f64,
    /// Mean `(Cb, Cr)` inside each view's garment mask.
    pub mean_chroma: Vec<(u32, [f64; 2])>,
}

/// Mean chroma of the masked pixels, `None` for an empty mask.
pub fn mean_chroma(image: &RgbImage, mask: &Mask) -> Option<[f64; 2]> {
    let mut acc = [0.0; 2];
    let mut n = 0usize;
    for (p, &m) in image.pixels().iter().zip(mask.bits()) {
        if m {
            let (_, c) = rgb_to_ycbcr(*p);
            acc[0] += c[0];
            acc[1] += c[1];
            n += 1;
        }
    }
    (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
}

/// `1 − |mean unit hue vector|` over the given chroma values. Achromatic
/// entries carry no hue and are skipped.
pub fn circular_hue_variance(chroma: &[[f64; 2]]) -> f64 {
    let mut acc = [0.0; 2];
    let mut n = 0usize;
    for c in chroma {
        let r = math::sqrt(c[0] * c[0] + c[1] * c[1]);
        if r > 1e-9 {
            acc[0] += c[0] / r;
            acc[1] += c[1] / r;
            n += 1;
        }
    }
    if n == 0 {
        return 0.0;
    }
    (1.0 - math::sqrt(acc[0] * acc[0] + acc[1] * acc[1]) / n as f64).max(0.0)
}

/// Renders every view and measures garment hue agreement.
pub fn hue_probe(
    cloud: &GaussianCloud,
    views: &[(CameraView, Mask)],
    step: usize,
    settings: &RenderSettings,
) -> Result<HueProbe> {
    let mut mean = Vec::with_capacity(views.len());
    for (cam, mask) in views {
        let img = render_view(cloud, cam, settings)?.pixels;
        if let Some(c) = mean_chroma(&img, mask) {
            mean.push((cam.view_index, c));
        }
    }
    let chroma: Vec<[f64; 2]> = mean.iter().map(|m| m.1).collect();
    Ok(HueProbe {
        step,
        hue_variance: circular_hue_variance(&chroma),
        mean_chroma: mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_bounds() {
        assert!(circular_hue_variance(&[[0.1, 0.2], [0.3, 0.6]]) < 1e-12);
        assert!((circular_hue_variance(&[[0.1, 0.0], [-0.2, 0.0]]) - 1.0).abs() < 1e-12);
        let v = circular_hue_variance(&[[0.1, 0.0], [0.0, 0.1]]);
        assert!((v - (1.0 - core::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-12);
    }
}
