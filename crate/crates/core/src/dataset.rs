//! Multi-view image set with per-view edit-stage versions and an
//! append-only update log.
//!
//! Every image replacement goes through [`ViewDataset::commit_stage`] or
//! [`ViewDataset::commit_batch`] and is logged with the image it wrote, so
//! replaying the log over the originals reproduces the dataset exactly.
//! Ordering uses a logical sequence number instead of wall-clock time.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{LabelMap, RgbImage};
use crate::prelude::*;
use crate::scene::CameraView;

/// Version of a view image, from the original to the restored final.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EditStage {
    /// Original capture, cached for conditioning; never rewritten.
    Stage0,
    /// Output of the per-view editor.
    Stage1,
    /// After face compositing.
    Stage2,
    /// After re-editing flagged views.
    Stage3,
    /// After restoration.
    Stage4,
}

impl EditStage {
    pub const ALL: [EditStage; 5] = [
        EditStage::Stage0,
        EditStage::Stage1,
        EditStage::Stage2,
        EditStage::Stage3,
        EditStage::Stage4,
    ];
}

/// Precomputed per-view annotations, as supplied by a manifest or a scene
/// generator.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ViewAnnotations {
    pub parsing: Option<LabelMap>,
    pub pose_keypoints: Option<Vec<[f64; 2]>>,
    pub face_keypoints: Option<Vec<[f64; 2]>>,
    /// Per-pixel body coordinates, row-major.
    pub dense_pose: Option<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewRecord {
    view_index: u32,
    camera: CameraView,
    images: BTreeMap<EditStage, Arc<RgbImage>>,
    current_stage: EditStage,
    /// Highest stage committed in the current round.
    round_stage: EditStage,
    pub annotations: ViewAnnotations,
}

impl ViewRecord {
    pub fn new(camera: CameraView, original: RgbImage, annotations: ViewAnnotations) -> Result<Self> {
        camera.validate()?;
        original.ensure_same_dims((camera.width, camera.height))?;
        let mut images = BTreeMap::new();
        images.insert(EditStage::Stage0, Arc::new(original));
        Ok(Self {
            view_index: camera.view_index,
            camera,
            images,
            current_stage: EditStage::Stage0,
            round_stage: EditStage::Stage0,
            annotations,
        })
    }

    pub fn view_index(&self) -> u32 {
        self.view_index
    }

    pub fn camera(&self) -> &CameraView {
        &self.camera
    }

    pub fn current_stage(&self) -> EditStage {
        self.current_stage
    }

    pub fn original(&self) -> &RgbImage {
        &self.images[&EditStage::Stage0]
    }

    pub fn image(&self, stage: EditStage) -> Option<&RgbImage> {
        self.images.get(&stage).map(|a| &**a)
    }

    pub fn current(&self) -> &RgbImage {
        &self.images[&self.current_stage]
    }
}

/// One entry of the update log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogEvent {
    RoundBegin {
        seq: u64,
        round: u32,
    },
    Commit {
        seq: u64,
        view_index: u32,
        stage: EditStage,
        round: u32,
        iteration: u64,
        /// FNV-1a digest of the committed pixels.
        digest: u64,
        #[serde(skip)]
        image: Arc<RgbImage>,
    },
    TransactionBegin {
        seq: u64,
        round: u32,
        size: usize,
    },
    TransactionEnd {
        seq: u64,
        round: u32,
    },
    Optimize {
        seq: u64,
        round: u32,
        iteration_start: u64,
        steps: u64,
    },
}

impl LogEvent {
    pub fn seq(&self) -> u64 {
        match self {
            LogEvent::RoundBegin { seq, .. }
            | LogEvent::Commit { seq, .. }
            | LogEvent::TransactionBegin { seq, .. }
            | LogEvent::TransactionEnd { seq, .. }
            | LogEvent::Optimize { seq, .. } => *seq,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViewDataset {
    records: Vec<ViewRecord>,
    log: Vec<LogEvent>,
    seq: u64,
    round: u32,
    iteration: u64,
}

impl ViewDataset {
    /// Builds a dataset; records are ordered by view index.
    pub fn new(mut records: Vec<ViewRecord>) -> Result<Self> {
        records.sort_by_key(|r| r.view_index);
        for w in records.windows(2) {
            if w[0].view_index == w[1].view_index {
                return Err(Error::DuplicateViewIndex(w[0].view_index));
            }
        }
        Ok(Self {
            records,
            log: Vec::new(),
            seq: 0,
            round: 0,
            iteration: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ViewRecord] {
        &self.records
    }

    pub fn view_indices(&self) -> Vec<u32> {
        self.records.iter().map(|r| r.view_index).collect()
    }

    fn position(&self, view_index: u32) -> Result<usize> {
        self.records
            .binary_search_by_key(&view_index, |r| r.view_index)
            .map_err(|_| Error::UnknownView(view_index))
    }

    pub fn record(&self, view_index: u32) -> Result<&ViewRecord> {
        Ok(&self.records[self.position(view_index)?])
    }

    pub fn update_log(&self) -> &[LogEvent] {
        &self.log
    }

    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    fn next_seq(&mut self) -> u64 {
        let s = self.seq;
        self.seq += 1;
        s
    }

    /// Opens a new edit round; stage ordering restarts for every view.
    pub fn begin_round(&mut self) -> u32 {
        self.round += 1;
        for r in &mut self.records {
            r.round_stage = EditStage::Stage0;
        }
        let seq = self.next_seq();
        self.log.push(LogEvent::RoundBegin { seq, round: self.round });
        self.round
    }

    fn check_commit(&self, view_index: u32, stage: EditStage, image: &RgbImage) -> Result<usize> {
        let pos = self.position(view_index)?;
        if stage == EditStage::Stage0 {
            return Err(Error::StageImmutable { view_index, stage });
        }
        let rec = &self.records[pos];
        image.ensure_same_dims(rec.original().dims())?;
        if stage < rec.round_stage {
            return Err(Error::StageOrder {
                view_index,
                stage,
                current: rec.round_stage,
            });
        }
        Ok(pos)
    }

    fn apply_commit(&mut self, pos: usize, stage: EditStage, image: Arc<RgbImage>) {
        let seq = self.next_seq();
        let rec = &mut self.records[pos];
        rec.images.insert(stage, image.clone());
        rec.current_stage = stage;
        rec.round_stage = stage;
        self.log.push(LogEvent::Commit {
            seq,
            view_index: rec.view_index,
            stage,
            round: self.round,
            iteration: self.iteration,
            digest: image.digest(),
            image,
        });
    }

    /// Stores `image` as `stage` of one view and makes it current.
    pub fn commit_stage(&mut self, view_index: u32, stage: EditStage, image: RgbImage) -> Result<()> {
        let pos = self.check_commit(view_index, stage, &image)?;
        self.apply_commit(pos, stage, Arc::new(image));
        Ok(())
    }

    /// Commits several images as one transaction: either all are applied or
    /// none is.
    pub fn commit_batch(&mut self, entries: Vec<(u32, EditStage, RgbImage)>) -> Result<()> {
        let mut positions = Vec::with_capacity(entries.len());
        // Validate against the state the batch itself produces.
        let mut staged: BTreeMap<u32, EditStage> = BTreeMap::new();
        for (v, stage, img) in &entries {
            let pos = self.check_commit(*v, *stage, img)?;
            if let Some(&prev) = staged.get(v) {
                if *stage < prev {
                    return Err(Error::StageOrder {
                        view_index: *v,
                        stage: *stage,
                        current: prev,
                    });
                }
            }
            staged.insert(*v, *stage);
            positions.push(pos);
        }
        let seq = self.next_seq();
        self.log.push(LogEvent::TransactionBegin {
            seq,
            round: self.round,
            size: entries.len(),
        });
        for ((_, stage, img), pos) in entries.into_iter().zip(positions) {
            self.apply_commit(pos, stage, Arc::new(img));
        }
        let seq = self.next_seq();
        self.log.push(LogEvent::TransactionEnd { seq, round: self.round });
        Ok(())
    }

    /// Logs an optimization phase of `steps` steps.
    pub fn record_optimize(&mut self, steps: u64) {
        let seq = self.next_seq();
        self.log.push(LogEvent::Optimize {
            seq,
            round: self.round,
            iteration_start: self.iteration,
            steps,
        });
        self.iteration += steps;
    }

    /// Every view's camera and current image, copied at one point in time.
    pub fn snapshot_targets(&self) -> Vec<(CameraView, RgbImage)> {
        self.records
            .iter()
            .map(|r| (r.camera.clone(), r.current().clone()))
            .collect()
    }

    /// A dataset with the same originals and annotations and an empty log.
    pub fn originals_only(&self) -> ViewDataset {
        let records = self
            .records
            .iter()
            .map(|r| {
                let mut images = BTreeMap::new();
                images.insert(EditStage::Stage0, r.images[&EditStage::Stage0].clone());
                ViewRecord {
                    view_index: r.view_index,
                    camera: r.camera.clone(),
                    images,
                    current_stage: EditStage::Stage0,
                    round_stage: EditStage::Stage0,
                    annotations: r.annotations.clone(),
                }
            })
            .collect();
        ViewDataset {
            records,
            log: Vec::new(),
            seq: 0,
            round: 0,
            iteration: 0,
        }
    }

    /// Applies logged events in order, as the original run did.
    pub fn apply_log(&mut self, events: &[LogEvent]) -> Result<()> {
        let mut pending: Option<Vec<(u32, EditStage, RgbImage)>> = None;
        for e in events {
            match e {
                LogEvent::RoundBegin { .. } => {
                    self.begin_round();
                }
                LogEvent::TransactionBegin { .. } => pending = Some(Vec::new()),
                LogEvent::TransactionEnd { .. } => {
                    let batch = pending
                        .take()
                        .ok_or_else(|| Error::invalid("transaction end without begin"))?;
                    self.commit_batch(batch)?;
                }
                LogEvent::Commit {
                    view_index,
                    stage,
                    image,
                    ..
                } => match pending.as_mut() {
                    Some(batch) => batch.push((*view_index, *stage, (**image).clone())),
                    None => self.commit_stage(*view_index, *stage, (**image).clone())?,
                },
                LogEvent::Optimize { steps, .. } => self.record_optimize(*steps),
            }
        }
        Ok(())
    }

    /// Rebuilds the dataset from its originals and log.
    pub fn replay(&self) -> Result<ViewDataset> {
        let mut d = self.originals_only();
        d.apply_log(&self.log)?;
        Ok(d)
    }
}

/// Checks, per round, that every view received exactly one `Stage4` commit,
/// all inside one transaction, before the round's first optimization.
pub fn audit_atomic_rounds(log: &[LogEvent], views: &[u32]) -> core::result::Result<(), String> {
    let mut round = 0u32;
    let mut stage4: BTreeMap<u32, usize> = BTreeMap::new();
    let mut optimized = false;
    let mut in_tx = false;
    let finish = |round: u32, stage4: &BTreeMap<u32, usize>| -> core::result::Result<(), String> {
        if round == 0 {
            return Ok(());
        }
        for v in views {
            if stage4.get(v).copied().unwrap_or(0) != 1 {
                return Err(format!("round {round}: view {v} has {:?} Stage4 commits", stage4.get(v)));
            }
        }
        Ok(())
    };
    for e in log {
        match e {
            LogEvent::RoundBegin { round: r, .. } => {
                finish(round, &stage4)?;
                round = *r;
                stage4.clear();
                optimized = false;
            }
            LogEvent::TransactionBegin { .. } => in_tx = true,
            LogEvent::TransactionEnd { .. } => in_tx = false,
            LogEvent::Commit { view_index, stage, .. } => {
                if optimized {
                    return Err(format!("round {round}: commit to view {view_index} after optimization"));
                }
                if *stage == EditStage::Stage4 {
                    if !in_tx {
                        return Err(format!("round {round}: Stage4 commit to view {view_index} outside a transaction"));
                    }
                    *stage4.entry(*view_index).or_default() += 1;
                }
            }
            LogEvent::Optimize { .. } => {
                for v in views {
                    if !stage4.contains_key(v) {
                        return Err(format!("round {round}: optimized before view {v} reached Stage4"));
                    }
                }
                optimized = true;
            }
        }
    }
    finish(round, &stage4)
}

/// True when some optimization happens between two image commits of the
/// same round (the mixed-version state of per-view updating).
pub fn has_interleaved_updates(log: &[LogEvent]) -> bool {
    let mut seen_commit = false;
    let mut seen_opt_after_commit = false;
    for e in log {
        match e {
            LogEvent::RoundBegin { .. } => {
                seen_commit = false;
                seen_opt_after_commit = false;
            }
            LogEvent::Commit { .. } => {
                if seen_opt_after_commit {
                    return true;
                }
                seen_commit = true;
            }
            LogEvent::Optimize { .. } => {
                if seen_commit {
                    seen_opt_after_commit = true;
                }
            }
            _ => {}
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::mat4_identity;

    fn dataset(n: u32) -> ViewDataset {
        let records = (0..n)
            .map(|v| {
                let cam = CameraView::new(mat4_identity(), [10.0, 10.0], [2.0, 2.0], 4, 4, v).unwrap();
                ViewRecord::new(cam, RgbImage::new(4, 4, [v as f64 / 10.0; 3]), ViewAnnotations::default()).unwrap()
            })
            .collect();
        ViewDataset::new(records).unwrap()
    }

    #[test]
    fn duplicate_index_is_rejected() {
        let mk = |v| {
            let cam = CameraView::new(mat4_identity(), [10.0, 10.0], [2.0, 2.0], 4, 4, v).unwrap();
            ViewRecord::new(cam, RgbImage::new(4, 4, [0.0; 3]), ViewAnnotations::default()).unwrap()
        };
        assert_eq!(
            ViewDataset::new(vec![mk(3), mk(1), mk(3)]).unwrap_err(),
            Error::DuplicateViewIndex(3)
        );
    }

    #[test]
    fn commit_rules() {
        let mut d = dataset(6);
        d.begin_round();
        d.commit_stage(5, EditStage::Stage1, RgbImage::new(4, 4, [1.0; 3])).unwrap();
        assert!(matches!(
            d.update_log().last(),
            Some(LogEvent::Commit {
                view_index: 5,
                stage: EditStage::Stage1,
                iteration: 0,
                ..
            })
        ));
        assert!(matches!(
            d.commit_stage(5, EditStage::Stage0, RgbImage::new(4, 4, [1.0; 3])),
            Err(Error::StageImmutable { .. })
        ));
        assert!(matches!(
            d.commit_stage(5, EditStage::Stage2, RgbImage::new(3, 4, [1.0; 3])),
            Err(Error::DimensionMismatch { .. })
        ));
        d.commit_stage(5, EditStage::Stage3, RgbImage::new(4, 4, [0.5; 3])).unwrap();
        assert!(matches!(
            d.commit_stage(5, EditStage::Stage2, RgbImage::new(4, 4, [0.5; 3])),
            Err(Error::StageOrder { .. })
        ));
        d.begin_round();
        d.commit_stage(5, EditStage::Stage1, RgbImage::new(4, 4, [0.2; 3])).unwrap();
    }

    #[test]
    fn failed_batch_changes_nothing() {
        let mut d = dataset(3);
        d.begin_round();
        let before = d.clone();
        let res = d.commit_batch(vec![
            (0, EditStage::Stage4, RgbImage::new(4, 4, [1.0; 3])),
            (9, EditStage::Stage4, RgbImage::new(4, 4, [1.0; 3])),
        ]);
        assert_eq!(res, Err(Error::UnknownView(9)));
        assert_eq!(d, before);
    }

    #[test]
    fn replay_reconstructs_state() {
        let mut d = dataset(3);
        d.begin_round();
        d.commit_stage(1, EditStage::Stage1, RgbImage::new(4, 4, [0.9; 3])).unwrap();
        d.commit_batch(
            (0..3)
                .map(|v| (v, EditStage::Stage4, RgbImage::new(4, 4, [v as f64 * 0.3; 3])))
                .collect(),
        )
        .unwrap();
        d.record_optimize(10);
        assert_eq!(d.replay().unwrap(), d);
        assert!(audit_atomic_rounds(d.update_log(), &d.view_indices()).is_ok());
        assert!(!has_interleaved_updates(d.update_log()));
    }

    #[test]
    fn snapshot_reads_current_stages() {
        let mut d = dataset(2);
        d.begin_round();
        d.commit_stage(1, EditStage::Stage2, RgbImage::new(4, 4, [0.7; 3])).unwrap();
        let snap = d.snapshot_targets();
        assert_eq!(snap[0].1, *d.record(0).unwrap().original());
        assert_eq!(snap[1].1.get(0, 0), [0.7; 3]);
    }

    #[test]
    fn interleaving_is_detected() {
        let mut d = dataset(2);
        d.begin_round();
        d.commit_stage(0, EditStage::Stage4, RgbImage::new(4, 4, [0.7; 3])).unwrap();
        d.record_optimize(3);
        d.commit_stage(1, EditStage::Stage4, RgbImage::new(4, 4, [0.7; 3])).unwrap();
        assert!(has_interleaved_updates(d.update_log()));
        assert!(audit_atomic_rounds(d.update_log(), &d.view_indices()).is_err());
    }
}
