//! Computer-aided detection of breast lesions in ultrafast 4D DCE-MRI.
//!
//! The crate covers the full desk-scale pipeline: synthetic phantom
//! generation, dynamic-series preprocessing, a 3D one-stage detector with
//! feature pyramid and focal loss, patient-level fold construction and
//! training, and FROC/CPM evaluation with bootstrap comparison.

pub mod anchors;
pub mod config;
pub mod detector;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod preprocessing;
pub mod records;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
