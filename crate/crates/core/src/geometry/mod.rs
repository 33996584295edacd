//! Metric calibration of photographs: ruler scaling, fiducial detection and
//! homography-based perspective correction.

mod fiducial;
mod homography;

pub use fiducial::{detect_fiducials, marker_cell, FiducialTemplate, MARKER_CELLS};
pub use homography::{estimate_homography_dlt, ransac_homography, Homography, RansacParams, RansacResult};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{warp_with_inverse, RasterError, RasterImage};

/// Target resolution of the rectification step, mm/px.
pub const DEFAULT_TARGET_MM: f64 = 0.1;
/// Margin kept around the fiducial rectangle, mm.
pub const DEFAULT_MARGIN_MM: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("ruler points are degenerate (distance {0:.3} px < 1 px)")]
    DegeneratePoints(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("degenerate configuration: {0}")]
    DegenerateConfiguration(String),
    #[error("need at least 4 correspondences, got {0}")]
    TooFewCorrespondences(usize),
    #[error("no consensus: best inlier count {0} < 4")]
    NoConsensus(usize),
    #[error("no fiducial candidates reached the detection threshold")]
    NoCandidates,
    #[error("transform is not invertible (det = {0:e})")]
    NonInvertible(f64),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// A photo point paired with its position in the metric rectified plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointCorrespondence {
    /// Photo coordinates, px.
    pub src: (f64, f64),
    /// Rectified-plane coordinates, mm.
    pub dst: (f64, f64),
    /// Match confidence in `[0, 1]`.
    pub score: f64,
}

impl PointCorrespondence {
    pub fn new(src: (f64, f64), dst: (f64, f64), score: f64) -> Result<Self, GeometryError> {
        let finite = [src.0, src.1, dst.0, dst.1].iter().all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&score) {
            return Err(GeometryError::InvalidParameter(format!(
                "correspondence {src:?} -> {dst:?} (score {score})"
            )));
        }
        Ok(Self { src, dst, score })
    }
}

/// Two clicked ruler points and the physical distance between them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RulerCalibration {
    pub p1: (f64, f64),
    pub p2: (f64, f64),
    pub distance_mm: f64,
}

impl RulerCalibration {
    pub fn pixel_distance(&self) -> f64 {
        ((self.p1.0 - self.p2.0).powi(2) + (self.p1.1 - self.p2.1).powi(2)).sqrt()
    }
}

/// Isotropic pixel size, mm/px.
pub fn scale_from_ruler(c: &RulerCalibration) -> Result<f64, GeometryError> {
    let d = c.pixel_distance();
    if !(d >= 1.0) {
        return Err(GeometryError::DegeneratePoints(d));
    }
    if !(c.distance_mm > 0.0 && c.distance_mm.is_finite()) {
        return Err(GeometryError::InvalidParameter(format!(
            "distance_mm = {}",
            c.distance_mm
        )));
    }
    Ok(c.distance_mm / d)
}

fn positive(name: &str, v: f64) -> Result<(), GeometryError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(GeometryError::InvalidParameter(format!("{name} = {v}")))
    }
}

/// Rescales an image whose pixels are `scale` mm wide to `target` mm/px.
pub fn resample_isotropic(img: &RasterImage, scale: f64, target: f64) -> Result<RasterImage, GeometryError> {
    positive("scale", scale)?;
    positive("target", target)?;
    let ratio = scale / target;
    let out_h = (img.height() as f64 * ratio).round() as usize;
    let out_w = (img.width() as f64 * ratio).round() as usize;
    Ok(crate::raster::warp(
        img,
        &Homography::scale(ratio),
        out_h,
        out_w,
        Some(target),
    )?)
}

/// Output size `(height, width)` of a rectification.
pub fn rectified_dims(target: f64, rect_w: f64, rect_h: f64, margin: f64) -> (usize, usize) {
    (
        ((rect_h + 2.0 * margin) / target).round() as usize,
        ((rect_w + 2.0 * margin) / target).round() as usize,
    )
}

/// Resamples the photo onto the metric plane `[-margin, rect + margin]` mm.
///
/// `h` maps photo pixels to plane millimetres. Output pixel `(r, c)` sits at
/// `(-margin + c * target, -margin + r * target)` mm.
pub fn perspective_correct(
    img: &RasterImage,
    h: &Homography,
    target: f64,
    rect_w: f64,
    rect_h: f64,
    margin: f64,
) -> Result<RasterImage, GeometryError> {
    positive("target", target)?;
    if !(margin >= 0.0) || !(rect_w > 0.0) || !(rect_h > 0.0) {
        return Err(GeometryError::InvalidParameter(format!(
            "rect {rect_w}x{rect_h} mm, margin {margin} mm"
        )));
    }
    let (out_h, out_w) = rectified_dims(target, rect_w, rect_h, margin);
    let h_inv = h
        .inverse()
        .map_err(|_| RasterError::NonInvertibleTransform(h.det().abs()))?;
    let out_to_mm = Homography::from_rows_unchecked([[target, 0.0, -margin], [0.0, target, -margin], [0.0, 0.0, 1.0]]);
    let out_to_photo = h_inv.compose(&out_to_mm);
    Ok(warp_with_inverse(img, &out_to_photo, out_h, out_w, Some(target), 0.0)?)
}

/// Calibration request, as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum CalibrationSpec {
    Ruler {
        p1: [f64; 2],
        p2: [f64; 2],
        distance_mm: f64,
    },
    Fiducial {
        /// Directory with `fiducial_{0..3}.png` and optional `templates.json`.
        templates: String,
        rect_mm: [f64; 2],
    },
}

/// Calibration result written next to each rectified image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSidecar {
    /// Spacing of the rectified image, mm/px.
    pub spacing_mm: f64,
    /// Photo px -> plane mm.
    pub homography: Homography,
    pub inliers: usize,
    pub transfer_error_px: f64,
    pub mode: String,
    /// Pixel size of the raw photograph as measured by the calibration, mm/px.
    pub source_spacing_mm: f64,
}
