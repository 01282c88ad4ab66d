//! The three refinement stages applied to edited views: face compositing,
//! outlier re-editing and null-space restoration.

pub mod face;
pub mod restore;
pub mod sparse;

pub use face::{face_composite, AnnotatedFaceDetector, FaceDetector, FaceNet, MockFaceDetector};
pub use restore::{
    nullspace_combine, nullspace_restore, restore_view, DegradationOp, DegradationSpec, PassThrough, PriorSpec, RestoreConfig, Restorer,
    SmoothingPrior,
};
pub use sparse::{
    dhash, re_edit, select_outlier_views, similarity, AnnotatedSegmenter, GarmentMask, HashCode, ReEditInput,
    Segmenter,
};
