//! Per-view garment editing: the editor contract, its auxiliary inputs,
//! the garment prompt and a deterministic mock editor.

mod mock;
mod palette;

pub use mock::{hue_offset, mock_edit, MockEditor};
pub use palette::{extract_palette, PaletteColor, DEFAULT_PALETTE_SIZE};

use serde::{Deserialize, Serialize};

use crate::dataset::ViewAnnotations;
use crate::error::{Error, Result};
use crate::image::{LabelMap, Mask, RgbImage};
use crate::prelude::*;

/// Parsing labels used by annotations and the scene generator.
pub mod labels {
    pub const BACKGROUND: u8 = 0;
    pub const HEAD: u8 = 1;
    pub const TORSO: u8 = 2;
    pub const LEGS: u8 = 3;
}

/// Maximum distance (pixels) an edit may reach beyond the inpainting mask.
pub const MASK_DILATION: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRegion {
    Upper,
    Lower,
    Dress,
}

impl TargetRegion {
    pub fn labels(self) -> &'static [u8] {
        match self {
            TargetRegion::Upper => &[labels::TORSO],
            TargetRegion::Lower => &[labels::LEGS],
            TargetRegion::Dress => &[labels::TORSO, labels::LEGS],
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TargetRegion::Upper => "upper",
            TargetRegion::Lower => "lower",
            TargetRegion::Dress => "dress",
        }
    }
}

/// The in-shop garment image and its dominant colors.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentPrompt {
    garment_image: RgbImage,
    target_region: TargetRegion,
    palette: Vec<PaletteColor>,
}

impl GarmentPrompt {
    pub fn new(garment_image: RgbImage, target_region: TargetRegion) -> Result<Self> {
        Self::with_palette_size(garment_image, target_region, DEFAULT_PALETTE_SIZE)
    }

    pub fn with_palette_size(garment_image: RgbImage, target_region: TargetRegion, k: usize) -> Result<Self> {
        if garment_image.width() == 0 || garment_image.height() == 0 {
            return Err(Error::invalid("garment image is empty"));
        }
        let palette = extract_palette(&garment_image, k)?;
        Ok(Self {
            garment_image,
            target_region,
            palette,
        })
    }

    pub fn garment_image(&self) -> &RgbImage {
        &self.garment_image
    }

    pub fn target_region(&self) -> TargetRegion {
        self.target_region
    }

    pub fn palette(&self) -> &[PaletteColor] {
        &self.palette
    }

    /// Pixel-weighted mean chroma `(Cb, Cr)` of the palette.
    pub fn mean_chroma(&self) -> [f64; 2] {
        let total: f64 = self.palette.iter().map(|p| p.weight).sum();
        let mut c = [0.0; 2];
        for p in &self.palette {
            c[0] += p.chroma[0] * p.weight / total;
            c[1] += p.chroma[1] * p.weight / total;
        }
        c
    }
}

/// Per-view conditioning maps for the editor.
#[derive(Debug, Clone, PartialEq)]
pub struct AuxInputs {
    pub pose_keypoints: Vec<[f64; 2]>,
    pub parsing: LabelMap,
    pub inpaint_mask: Mask,
    pub dense_pose: Option<Vec<[f64; 3]>>,
}

impl AuxInputs {
    pub fn validate(&self, dims: (usize, usize)) -> Result<()> {
        let check = |d: (usize, usize)| {
            if d != dims {
                Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: d,
                })
            } else {
                Ok(())
            }
        };
        check(self.parsing.dims())?;
        check(self.inpaint_mask.dims())?;
        if let Some(dp) = &self.dense_pose {
            if dp.len() != dims.0 * dims.1 {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: (dp.len(), 1),
                });
            }
        }
        let outside_body = self
            .inpaint_mask
            .bits()
            .iter()
            .zip(self.parsing.labels())
            .any(|(&m, &l)| m && l == labels::BACKGROUND);
        if outside_body {
            return Err(Error::invalid("inpainting mask extends outside the parsed body"));
        }
        Ok(())
    }
}

/// A service that can parse a person image when no annotations exist.
pub trait AuxProvider: Send + Sync {
    fn parse(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<LabelMap>;
}

fn label_centroid(parsing: &LabelMap, label: u8) -> Option<[f64; 2]> {
    let (w, _) = parsing.dims();
    let mut acc = [0.0; 2];
    let mut n = 0usize;
    for (i, &l) in parsing.labels().iter().enumerate() {
        if l == label {
            acc[0] += (i % w) as f64 + 0.5;
            acc[1] += (i / w) as f64 + 0.5;
            n += 1;
        }
    }
    (n > 0).then(|| [acc[0] / n as f64, acc[1] / n as f64])
}

/// Builds the editor's auxiliary inputs for one view.
///
/// Annotated views (parsing present) are derived from the annotations and
/// pass supplied keypoints through unchanged. Unannotated views need a
/// provider; without one this fails with [`Error::MissingAux`].
pub fn synthesize_aux_inputs(
    view_index: u32,
    image: &RgbImage,
    annotations: &ViewAnnotations,
    region: TargetRegion,
    provider: Option<&dyn AuxProvider>,
) -> Result<AuxInputs> {
    let parsing = match (&annotations.parsing, provider) {
        (Some(p), _) => p.clone(),
        (None, Some(provider)) => provider.parse(view_index, image, region)?,
        (None, None) => return Err(Error::MissingAux(view_index)),
    };
    let inpaint_mask = parsing.mask_of(region.labels());
    let pose_keypoints = match &annotations.pose_keypoints {
        Some(k) => k.clone(),
        None => [labels::HEAD, labels::TORSO, labels::LEGS]
            .iter()
            .filter_map(|&l| label_centroid(&parsing, l))
            .collect(),
    };
    let aux = AuxInputs {
        pose_keypoints,
        parsing,
        inpaint_mask,
        dense_pose: annotations.dense_pose.clone(),
    };
    aux.validate(image.dims())?;
    Ok(aux)
}

/// How to reach an editor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EditorBinding {
    Mock {
        seed: u64,
        jitter: f64,
        /// Views whose first edit uses a decoy garment.
        #[serde(default)]
        sabotage: Vec<u32>,
        /// Whether re-edits of sabotaged views fail the same way.
        #[serde(default)]
        sabotage_on_reedit: bool,
    },
    Remote {
        endpoint: String,
        seed: u64,
        timeout_secs: f64,
    },
}

impl EditorBinding {
    pub fn seed(&self) -> u64 {
        match self {
            EditorBinding::Mock { seed, .. } | EditorBinding::Remote { seed, .. } => *seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            EditorBinding::Mock { jitter, .. } => {
                if !(jitter.is_finite() && *jitter >= 0.0) {
                    return Err(Error::invalid(format!("jitter {jitter} must be finite and ≥ 0")));
                }
            }
            EditorBinding::Remote {
                endpoint, timeout_secs, ..
            } => {
                if endpoint.is_empty() {
                    return Err(Error::invalid("remote editor endpoint is empty"));
                }
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(Error::invalid("remote timeout must be positive"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditPass {
    Initial,
    ReEdit,
}

/// Everything an editor sees for one view.
#[derive(Debug, Clone, Copy)]
pub struct EditRequest<'a> {
    pub view_index: u32,
    pub image: &'a RgbImage,
    pub prompt: &'a GarmentPrompt,
    pub aux: &'a AuxInputs,
    pub seed: u64,
    pub pass: EditPass,
}

/// A per-view garment editor.
pub trait Editor: Send + Sync {
    fn edit(&self, request: &EditRequest<'_>) -> Result<RgbImage>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditOutcome {
    pub image: RgbImage,
    /// Pixels outside the dilated mask that the editor changed and were
    /// restored.
    pub clipped_pixels: usize,
}

/// Runs an editor and enforces mask confinement on its output.
pub fn edit_view(editor: &dyn Editor, request: &EditRequest<'_>) -> Result<EditOutcome> {
    let dims = request.image.dims();
    request.aux.validate(dims)?;
    if request.aux.inpaint_mask.is_empty() {
        log::warn!("view {}: empty inpainting mask, edit skipped", request.view_index);
        return Ok(EditOutcome {
            image: request.image.clone(),
            clipped_pixels: 0,
        });
    }
    let edited = editor.edit(request)?;
    if edited.dims() != dims {
        return Err(Error::EditorUnavailable {
            view_index: request.view_index,
            reason: format!("editor returned {:?}, expected {:?}", edited.dims(), dims),
        });
    }
    let allowed = request.aux.inpaint_mask.dilate(MASK_DILATION);
    let mut out = edited;
    let mut clipped = 0usize;
    for ((p, &orig), &ok) in out
        .pixels_mut()
        .iter_mut()
        .zip(request.image.pixels())
        .zip(allowed.bits())
    {
        if !ok && *p != orig {
            *p = orig;
            clipped += 1;
        }
    }
    if clipped > 0 {
        log::warn!(
            "view {}: editor changed {clipped} pixels outside the mask; restored",
            request.view_index
        );
    }
    Ok(EditOutcome {
        image: out,
        clipped_pixels: clipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Leaky;
    impl Editor for Leaky {
        fn edit(&self, r: &EditRequest<'_>) -> Result<RgbImage> {
            Ok(r.image.map(|_| [1.0, 0.0, 1.0]))
        }
    }

    fn aux(w: usize, h: usize) -> AuxInputs {
        let parsing = LabelMap::new(
            w,
            h,
            (0..w * h)
                .map(|i| if (i % w) < w / 2 { labels::TORSO } else { labels::BACKGROUND })
                .collect(),
        )
        .unwrap();
        AuxInputs {
            pose_keypoints: vec![],
            inpaint_mask: parsing.mask_of(&[labels::TORSO]),
            parsing,
            dense_pose: None,
        }
    }

    #[test]
    fn leaks_are_clipped_to_the_dilated_mask() {
        let img = RgbImage::new(40, 10, [0.2; 3]);
        let a = aux(40, 10);
        let prompt = GarmentPrompt::new(RgbImage::new(4, 4, [0.8, 0.2, 0.2]), TargetRegion::Upper).unwrap();
        let req = EditRequest {
            view_index: 0,
            image: &img,
            prompt: &prompt,
            aux: &a,
            seed: 1,
            pass: EditPass::Initial,
        };
        let out = edit_view(&Leaky, &req).unwrap();
        assert!(out.clipped_pixels > 0);
        for y in 0..10 {
            for x in 0..40 {
                let changed = out.image.get(x, y) != [0.2; 3];
                assert_eq!(changed, x < 20 + MASK_DILATION, "({x},{y})");
            }
        }
    }

    #[test]
    fn unannotated_view_without_provider_is_missing_aux() {
        let img = RgbImage::new(4, 4, [0.0; 3]);
        assert_eq!(
            synthesize_aux_inputs(3, &img, &ViewAnnotations::default(), TargetRegion::Upper, None),
            Err(Error::MissingAux(3))
        );
    }

    #[test]
    fn annotations_pass_through() {
        let a = aux(8, 8);
        let ann = ViewAnnotations {
            parsing: Some(a.parsing.clone()),
            pose_keypoints: Some(vec![[1.0, 2.0], [3.5, 4.25]]),
            face_keypoints: None,
            dense_pose: None,
        };
        let got = synthesize_aux_inputs(0, &RgbImage::new(8, 8, [0.0; 3]), &ann, TargetRegion::Upper, None).unwrap();
        assert_eq!(got.parsing, a.parsing);
        assert_eq!(got.pose_keypoints, vec![[1.0, 2.0], [3.5, 4.25]]);
        assert_eq!(got.inpaint_mask, a.inpaint_mask);
    }
}
