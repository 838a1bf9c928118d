//! Date-palm crown recognition and health classification from multiband
//! imagery.
//!
//! The pipeline runs vegetation indices, tiling, a pixelwise probability
//! model, crown detection with rule-based health classes, and evaluation
//! against ground truth. [`synth`] generates annotated scenes for testing it
//! end to end.
// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod augment;
pub mod detect;
pub mod error;
pub mod evaluate;
pub mod indices;
pub mod model;
pub mod pipeline;
pub mod probability;
pub mod raster;
pub mod synth;
pub mod tiling;

pub use annotation::{AnnotationSet, Crown, HealthClass};
pub use error::{Error, Result};
pub use probability::ProbabilityMap;
pub use raster::{load_raster, save_raster, Band, Mask, Raster};
