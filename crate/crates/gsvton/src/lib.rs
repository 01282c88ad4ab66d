//! Files, services and the command line around [`gsvton_core`].
//!
//! - [`io`]: PNG (sRGB on disk, linear in memory), raw float dumps,
//!   3DGS-layout PLY, JSON manifests and update-log export.
//! - [`remote`]: HTTP clients for an out-of-process editor, face detector,
//!   segmenter and parser.
//! - [`pipeline`]: job files, overrides, service wiring and artifacts.
//! - [`cli`]: the `gsvton` binary.

pub mod cli;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod remote;

pub use error::{IoError, Result};
pub use gsvton_core as core;
