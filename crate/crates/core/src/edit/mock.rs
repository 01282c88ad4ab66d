use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AuxInputs, EditPass, EditRequest, Editor, GarmentPrompt};
use crate::error::Result;
use crate::image::{rgb_to_ycbcr, ycbcr_to_rgb, RgbImage};
use crate::math;
use crate::prelude::*;

/// Largest per-view hue rotation at jitter 1, in degrees.
pub const MAX_HUE_DEGREES: f64 = 30.0;

/// Colors of the planted decoy garment: high-contrast vertical stripes.
const DECOY: [[f64; 3]; 2] = [[0.95, 0.85, 0.15], [0.2, 0.05, 0.3]];
const DECOY_BANDS: usize = 9;

/// Deterministic stand-in for a diffusion try-on editor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MockEditor {
    pub jitter: f64,
    pub sabotage: BTreeSet<u32>,
    pub sabotage_on_reedit: bool,
}

impl MockEditor {
    pub fn new(jitter: f64) -> Self {
        Self {
            jitter,
            ..Self::default()
        }
    }

    pub fn with_sabotage(mut self, views: impl IntoIterator<Item = u32>) -> Self {
        self.sabotage.extend(views);
        self
    }
}

impl Editor for MockEditor {
    fn edit(&self, r: &EditRequest<'_>) -> Result<RgbImage> {
        let sabotaged =
            self.sabotage.contains(&r.view_index) && (r.pass == EditPass::Initial || self.sabotage_on_reedit);
        Ok(mock_edit(r.image, r.prompt, r.aux, r.seed, self.jitter, r.view_index, sabotaged))
    }
}

/// Hue offset in radians for one view.
pub fn hue_offset(seed: u64, view_index: u32, jitter: f64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ view_index as u64);
    let u: f64 = rng.random();
    jitter * (2.0 * u - 1.0) * MAX_HUE_DEGREES.to_radians()
}

/// Recolors the masked region toward the prompt palette.
///
/// Each masked pixel keeps its luma and takes the chroma of the palette
/// color nearest in luma, rotated by the view's hue offset. A sabotaged
/// edit paints decoy stripes across the mask instead.
pub fn mock_edit(
    image: &RgbImage,
    prompt: &GarmentPrompt,
    aux: &AuxInputs,
    seed: u64,
    jitter: f64,
    view_index: u32,
    sabotaged: bool,
) -> RgbImage {
    let mask = &aux.inpaint_mask;
    let mut out = image.clone();
    if sabotaged {
        let Some((x0, _, x1, _)) = mask.bbox() else {
            return out;
        };
        let span = (x1 - x0 + 1) as f64;
        for y in 0..image.height() {
            for x in 0..image.width() {
                if mask.get(x, y) {
                    let band = (((x - x0) as f64 / span) * DECOY_BANDS as f64) as usize;
                    out.set(x, y, DECOY[band % 2]);
                }
            }
        }
        return out;
    }
    let theta = hue_offset(seed, view_index, jitter);
    let (s, c) = (math::sin(theta), math::cos(theta));
    for y in 0..image.height() {
        for x in 0..image.width() {
            if !mask.get(x, y) {
                continue;
            }
            let p = image.get(x, y);
            let (yl, _) = rgb_to_ycbcr(p);
            let target = prompt
                .palette()
                .iter()
                .min_by(|a, b| (a.luma - yl).abs().total_cmp(&(b.luma - yl).abs()))
                .expect("palette is never empty");
            let [cb, cr] = target.chroma;
            let rot = [c * cb - s * cr, s * cb + c * cr];
            let rgb = ycbcr_to_rgb(yl, rot);
            out.set(x, y, [rgb[0].clamp(0.0, 1.0), rgb[1].clamp(0.0, 1.0), rgb[2].clamp(0.0, 1.0)]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edit::{labels, TargetRegion};
    use crate::image::LabelMap;

    fn setup() -> (RgbImage, GarmentPrompt, AuxInputs) {
        let img = RgbImage::from_fn(16, 16, |x, _| if x < 8 { [0.4; 3] } else { [0.1, 0.5, 0.2] });
        let parsing = LabelMap::new(16, 16, (0..256).map(|i| if i % 16 < 8 { labels::TORSO } else { 0 }).collect()).unwrap();
        let aux = AuxInputs {
            pose_keypoints: vec![],
            inpaint_mask: parsing.mask_of(&[labels::TORSO]),
            parsing,
            dense_pose: None,
        };
        let prompt = GarmentPrompt::new(RgbImage::new(6, 6, [0.8, 0.2, 0.2]), TargetRegion::Upper).unwrap();
        (img, prompt, aux)
    }

    #[test]
    fn gray_torso_takes_palette_chroma_and_keeps_luma() {
        let (img, prompt, aux) = setup();
        let out = mock_edit(&img, &prompt, &aux, 7, 0.0, 0, false);
        let (_, want) = rgb_to_ycbcr([0.8, 0.2, 0.2]);
        for y in 0..16 {
            for x in 0..16 {
                if x < 8 {
                    let (yl, c) = rgb_to_ycbcr(out.get(x, y));
                    assert!((yl - 0.4).abs() < 1e-12);
                    assert!((c[0] - want[0]).abs() < 1e-12 && (c[1] - want[1]).abs() < 1e-12);
                } else {
                    assert_eq!(out.get(x, y), img.get(x, y));
                }
            }
        }
    }

    #[test]
    fn jitter_changes_hue_per_view() {
        assert_eq!(hue_offset(3, 4, 0.0), 0.0);
        let a = hue_offset(3, 4, 0.5);
        let b = hue_offset(3, 5, 0.5);
        assert!(a != b && a.abs() <= 15f64.to_radians());
    }

    #[test]
    fn sabotage_paints_stripes() {
        let (img, prompt, aux) = setup();
        let out = mock_edit(&img, &prompt, &aux, 7, 0.0, 0, true);
        assert_eq!(out.get(0, 0), DECOY[0]);
        assert_eq!(out.get(2, 3), DECOY[0]);
        assert_eq!(out.get(1, 3), DECOY[1]);
        assert_eq!(out.get(12, 3), img.get(12, 3));
    }
}
