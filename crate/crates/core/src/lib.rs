//! Toolkit for coronal brain-slab photographs: metric calibration and
//! perspective correction, band-restricted segmentation metrics, procedural
//! training data, and a from-scratch U-Net segmenter with its pipeline and
//! QC service.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod geometry;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod unet;
