//! Gaussian-splatting scene editing for image-prompted virtual try-on.
//!
//! The crate is `no_std` + `alloc`. It holds everything that is pure
//! computation: the Gaussian scene model, the splat renderer and its analytic
//! gradients, the versioned multi-view dataset, the per-view editor contract
//! with a deterministic mock editor, the three refinement stages, the
//! dataset-update strategies, and pixel metrics. File formats, HTTP bindings
//! and the command line live in the `gsvton` crate.
//!
//! Enable the `parallel` feature to render tiles on a rayon pool; output is
//! bit-identical with and without it.
#![cfg_attr(not(any(feature = "std", test)), no_std)]

extern crate alloc;

pub mod dataset;
pub mod edit;
pub mod error;
pub mod image;
pub mod math;
pub mod metrics;
pub mod optimize;
pub mod refine;
pub mod render;
pub mod scene;
pub mod sh;
pub mod strategy;
pub mod synth;

mod prelude;

pub use error::{Error, Result};
pub use image::{LabelMap, Mask, RgbImage};
pub use scene::{CameraView, Gaussian, GaussianCloud};
