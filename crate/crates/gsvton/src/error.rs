use std::path::PathBuf;

/// Errors from file formats, remote services and the command line.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("malformed manifest {path}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    #[error(transparent)]
    Core(#[from] gsvton_core::Error),
}

impl IoError {
    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        IoError::File {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        IoError::Format {
            path: path.into(),
            msg: msg.into(),
        }
    }

    /// Stable machine-readable name for error reports.
    pub fn kind(&self) -> &'static str {
        use gsvton_core::Error as E;
        match self {
            IoError::File { .. } => "io",
            IoError::Format { .. } => "format",
            IoError::Manifest { .. } => "malformed_manifest",
            IoError::Core(e) => match e {
                E::InvalidParameter(_) => "invalid_parameter",
                E::DegenerateCovariance { .. } => "degenerate_covariance",
                E::DimensionMismatch { .. } => "dimension_mismatch",
                E::Precondition(_) => "precondition",
                E::DuplicateViewIndex(_) => "duplicate_view_index",
                E::UnknownView(_) => "unknown_view",
                E::StageImmutable { .. } => "stage_immutable",
                E::StageOrder { .. } => "stage_order",
                E::MissingAux(_) => "missing_aux",
                E::EditorUnavailable { .. } | E::RoundAborted { .. } => "editor_unavailable",
            },
        }
    }
}

pub type Result<T, E = IoError> = std::result::Result<T, E>;
