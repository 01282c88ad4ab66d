//! Stage 2: find views whose garment disagrees with their neighbors by
//! difference hashing, and re-edit them.

use serde::{Deserialize, Serialize};

use crate::dataset::ViewDataset;
use crate::edit::{edit_view, AuxInputs, EditPass, EditRequest, Editor, GarmentPrompt, TargetRegion};
use crate::error::{Error, Result};
use crate::image::{resize_area, Mask, RgbImage};
use crate::math;
use crate::prelude::*;

pub const DEFAULT_TAU: f64 = 0.75;
pub const DEFAULT_RETRIES: u32 = 2;

/// Grid cell means are quantized to this many steps before comparison.
pub const DHASH_LEVELS: f64 = 255.0;
/// A cell counts as darker than its right neighbor only when it is at
/// least this many quantized steps darker, so splat ripple on a flat
/// garment hashes as flat.
pub const DHASH_MIN_STEP: f64 = 2.0;

/// 64-bit difference hash.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct HashCode(pub u64);

/// Difference hash of an image: Rec.601 luma area-averaged onto 9×8
/// cells; bit `r·8 + c` is set iff cell `(r, c)` is darker than `(r, c+1)`
/// by at least [`DHASH_MIN_STEP`] quantized steps.
pub fn dhash(image: &RgbImage) -> HashCode {
    let (w, h) = image.dims();
    if w == 0 || h == 0 {
        return HashCode(0);
    }
    let grid = resize_area(&image.luma_plane(), w, h, 9, 8);
    let q: Vec<f64> = grid.iter().map(|v| math::round(v * DHASH_LEVELS)).collect();
    let mut bits = 0u64;
    for r in 0..8 {
        for c in 0..8 {
            if q[r * 9 + c + 1] - q[r * 9 + c] >= DHASH_MIN_STEP {
                bits |= 1 << (r * 8 + c);
            }
        }
    }
    HashCode(bits)
}

/// `1 − Hamming(a, b)/64`.
pub fn similarity(a: HashCode, b: HashCode) -> f64 {
    1.0 - (a.0 ^ b.0).count_ones() as f64 / 64.0
}

/// Garment region of one view and the image restricted to it.
#[derive(Debug, Clone, PartialEq)]
pub struct GarmentMask {
    mask: Mask,
    masked_image: RgbImage,
    view_index: u32,
}

impl GarmentMask {
    pub fn new(image: &RgbImage, mask: Mask, view_index: u32) -> Result<Self> {
        let masked_image = image.masked(&mask)?;
        Ok(Self {
            mask,
            masked_image,
            view_index,
        })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn masked_image(&self) -> &RgbImage {
        &self.masked_image
    }

    pub fn view_index(&self) -> u32 {
        self.view_index
    }

    /// Hash of the masked image cropped to the mask's bounding box, so the
    /// garment fills the hash grid in every view.
    pub fn hash(&self) -> HashCode {
        match self.mask.bbox() {
            Some((x0, y0, x1, y1)) => dhash(&self.masked_image.crop(x0, y0, x1 - x0 + 1, y1 - y0 + 1)),
            None => dhash(&self.masked_image),
        }
    }
}

/// Produces the garment mask of a view.
pub trait Segmenter: Send + Sync {
    fn segment(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<Mask>;
}

/// Reads garment masks from the dataset's parsing annotations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedSegmenter {
    parsing: BTreeMap<u32, crate::image::LabelMap>,
}

impl AnnotatedSegmenter {
    pub fn from_dataset(dataset: &ViewDataset) -> Self {
        let parsing = dataset
            .records()
            .iter()
            .filter_map(|r| r.annotations.parsing.clone().map(|p| (r.view_index(), p)))
            .collect();
        Self { parsing }
    }
}

impl Segmenter for AnnotatedSegmenter {
    fn segment(&self, view_index: u32, image: &RgbImage, region: TargetRegion) -> Result<Mask> {
        let p = self.parsing.get(&view_index).ok_or(Error::MissingAux(view_index))?;
        image.ensure_same_dims(p.dims())?;
        Ok(p.mask_of(region.labels()))
    }
}

/// Similarities within one group of consecutive views.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupScore {
    pub members: Vec<u32>,
    /// `(a, b, similarity)` for every pair.
    pub pairwise: Vec<(u32, u32, f64)>,
    /// Member whose best match is worst.
    pub candidate: u32,
    /// That member's best similarity to the others.
    pub candidate_best: f64,
}

/// Splits views into consecutive triples; a trailing one or two views join
/// the last triple.
pub fn group_views(count: usize) -> Vec<core::ops::Range<usize>> {
    if count < 3 {
        return Vec::new();
    }
    let full = count / 3;
    let mut groups: Vec<_> = (0..full).map(|g| g * 3..g * 3 + 3).collect();
    if count % 3 != 0 {
        let last = groups.last_mut().expect("at least one triple");
        last.end = count;
    }
    groups
}

/// Scores every group. Within a group the candidate is the member whose
/// maximum similarity to the others is smallest; ties go to the lowest
/// view index.
pub fn score_groups(masked: &[GarmentMask]) -> Vec<GroupScore> {
    let hashes: Vec<HashCode> = masked.iter().map(GarmentMask::hash).collect();
    group_views(masked.len())
        .into_iter()
        .map(|range| {
            let idx: Vec<usize> = range.collect();
            let mut pairwise = Vec::new();
            let mut best = vec![f64::NEG_INFINITY; idx.len()];
            for a in 0..idx.len() {
                for b in a + 1..idx.len() {
                    let s = similarity(hashes[idx[a]], hashes[idx[b]]);
                    pairwise.push((masked[idx[a]].view_index, masked[idx[b]].view_index, s));
                    best[a] = best[a].max(s);
                    best[b] = best[b].max(s);
                }
            }
            let mut pick = 0;
            for k in 1..idx.len() {
                let (vk, vp) = (masked[idx[k]].view_index, masked[idx[pick]].view_index);
                if best[k] < best[pick] || (best[k] == best[pick] && vk < vp) {
                    pick = k;
                }
            }
            GroupScore {
                members: idx.iter().map(|&i| masked[i].view_index).collect(),
                pairwise,
                candidate: masked[idx[pick]].view_index,
                candidate_best: best[pick],
            }
        })
        .collect()
}

/// Views to re-edit: each group's candidate whose best similarity is
/// below `tau`.
pub fn select_outlier_views(masked: &[GarmentMask], tau: f64) -> Vec<u32> {
    if masked.len() < 3 {
        log::warn!("outlier selection needs at least 3 views, got {}", masked.len());
        return Vec::new();
    }
    if masked.windows(2).any(|w| w[0].view_index >= w[1].view_index) {
        log::warn!("outlier selection input is not ordered by view index");
    }
    score_groups(masked)
        .into_iter()
        .filter(|g| g.candidate_best < tau)
        .map(|g| g.candidate)
        .collect()
}

/// Calls `f` until it succeeds, retrying up to `retries` more times while
/// it reports the editor unavailable.
pub fn with_retries<T>(retries: u32, mut f: impl FnMut(u32) -> Result<T>) -> Result<T> {
    let mut attempt = 0;
    loop {
        match f(attempt) {
            Err(Error::EditorUnavailable { view_index, reason }) if attempt < retries => {
                log::warn!("view {view_index}: editor unavailable ({reason}); retrying");
                attempt += 1;
            }
            other => return other,
        }
    }
}

/// One flagged view to re-edit.
#[derive(Debug, Clone, Copy)]
pub struct ReEditInput<'a> {
    pub view_index: u32,
    /// The view's face-refined image; re-edits start from it.
    pub image: &'a RgbImage,
    pub aux: &'a AuxInputs,
}

/// Re-edits flagged views with the derived seed `seed ^ round ^ 1`.
///
/// Fails with [`Error::RoundAborted`] listing every view whose editor
/// stayed unavailable after `retries` retries.
pub fn re_edit(
    editor: &dyn Editor,
    inputs: &[ReEditInput<'_>],
    prompt: &GarmentPrompt,
    seed: u64,
    round: u32,
    retries: u32,
) -> Result<Vec<(u32, RgbImage)>> {
    let derived = seed ^ round as u64 ^ 1;
    let mut out = Vec::with_capacity(inputs.len());
    let mut failures = Vec::new();
    for inp in inputs {
        let res = with_retries(retries, |_| {
            edit_view(
                editor,
                &EditRequest {
                    view_index: inp.view_index,
                    image: inp.image,
                    prompt,
                    aux: inp.aux,
                    seed: derived,
                    pass: EditPass::ReEdit,
                },
            )
        });
        match res {
            Ok(o) => out.push((inp.view_index, o.image)),
            Err(Error::EditorUnavailable { view_index, reason }) => failures.push((view_index, reason)),
            Err(e) => return Err(e),
        }
    }
    if !failures.is_empty() {
        return Err(Error::RoundAborted { round, failures });
    }
    Ok(out)
}
