use crate::dataset::EditStage;
use crate::prelude::*;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate covariance (condition number {condition:e})")]
    DegenerateCovariance { condition: f64 },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("duplicate view index {0}")]
    DuplicateViewIndex(u32),

    #[error("unknown view index {0}")]
    UnknownView(u32),

    #[error("stage {stage:?} of view {view_index} cannot be written")]
    StageImmutable { view_index: u32, stage: EditStage },

    #[error("stage {stage:?} for view {view_index} would move backwards from {current:?}")]
    StageOrder {
        view_index: u32,
        stage: EditStage,
        current: EditStage,
    },

    #[error("view {0} has no auxiliary inputs and none can be synthesized")]
    MissingAux(u32),

    #[error("editor unavailable for view {view_index}: {reason}")]
    EditorUnavailable { view_index: u32, reason: String },

    #[error("round {round} aborted: {failures:?}")]
    RoundAborted {
        round: u32,
        failures: Vec<(u32, String)>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
