//! Biopsy whole-slide analysis toolkit.
//!
//! Stages, in pipeline order: [`slide_io`] reads multi-resolution slides,
//! [`segmentation`] finds tissue and pen marks, [`annotation`] turns pen
//! marks into pixel labels, [`patching`] tiles slides into labelled patches,
//! [`patch_model`] classifies patches, [`aggregation`] turns patch
//! probabilities into slide-level calls, [`metrics`] evaluates them and
//! [`rendering`] draws confidence overlays. [`synth`] generates slides with
//! exact ground truth; [`pipeline`] chains everything.

pub mod aggregation;
pub mod annotation;
pub mod error;
pub mod features;
pub mod gbt;
pub mod geometry;
pub mod metrics;
pub mod morphology;
pub mod patch_model;
pub mod patching;
pub mod pipeline;
pub mod raster;
pub mod rendering;
pub mod segmentation;
pub mod slide_io;
pub mod synth;

pub use aggregation::{LossMatrix, SlidePrediction};
pub use error::{Error, Result};
pub use gbt::{GbtModel, GbtParams, Objective};
pub use patch_model::{ProbMatrix, Stage};
pub use pipeline::{PipelineConfig, PredictionRecord, TruthRecord};
pub use raster::{BinaryMask, Grid, LabelMask, Rect, RgbImage};
pub use slide_io::ImagePyramid;
