//! Band-restricted segmentation metrics.
//!
//! Both masks are intersected with the evaluation region (the filled reference
//! dilated by the band width) before Dice, average symmetric surface distance
//! and HD95 are computed, so prediction mass far from the reference is ignored.
//! Surface distances are measured between boundary-pixel centres.

mod summary;

pub use summary::{box_plot, percentile, summarize, write_csv, BoxPlot, MetricSummary, SummaryStats};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::{boundary, dilate_mm, edt, fill_holes, BinaryMask, RasterError};

/// Band around the filled reference inside which metrics are computed, mm.
pub const DEFAULT_BAND_MM: f64 = 10.0;
/// ASSD above which an image counts as an outlier, mm.
pub const DEFAULT_OUTLIER_MM: f64 = 2.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimensionMismatch((usize, usize), (usize, usize)),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    SpacingMismatch(Option<f64>, Option<f64>),
    #[error("masks must be calibrated to measure distances")]
    Uncalibrated,
    #[error("cannot summarize an empty report list")]
    EmptyReportList,
    #[error(transparent)]
    Raster(#[from] RasterError),
}

fn check_pair(a: &BinaryMask, b: &BinaryMask) -> Result<(), MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::DimensionMismatch(a.dims(), b.dims()));
    }
    match (a.spacing(), b.spacing()) {
        (Some(x), Some(y)) if (x - y).abs() > 1e-9 * x.max(y) => {
            Err(MetricsError::SpacingMismatch(a.spacing(), b.spacing()))
        }
        _ => Ok(()),
    }
}

/// `dilate(fill_holes(reference), band_mm)`.
pub fn evaluation_region(reference: &BinaryMask, band_mm: f64) -> Result<BinaryMask, MetricsError> {
    if reference.spacing().is_none() {
        return Err(MetricsError::Uncalibrated);
    }
    Ok(dilate_mm(&fill_holes(reference), band_mm)?)
}

fn restrict(
    pred: &BinaryMask,
    reference: &BinaryMask,
    region: &BinaryMask,
) -> Result<(BinaryMask, BinaryMask), MetricsError> {
    check_pair(pred, reference)?;
    check_pair(pred, region)?;
    Ok((pred.and(region)?, reference.and(region)?))
}

/// Dice of the two masks inside `region`; 1.0 when both are empty there.
pub fn masked_dice(pred: &BinaryMask, reference: &BinaryMask, region: &BinaryMask) -> Result<f64, MetricsError> {
    let (p, r) = restrict(pred, reference, region)?;
    Ok(dice(&p, &r))
}

fn dice(p: &BinaryMask, r: &BinaryMask) -> f64 {
    let (mut both, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.bits().iter().zip(r.bits()) {
        np += a as usize;
        nr += b as usize;
        both += (a && b) as usize;
    }
    if np + nr == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + nr) as f64
    }
}

/// Directed boundary distances, pred->ref then ref->pred, or `None` when
/// either restricted mask has no boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct SurfaceDistances {
    pub pred_to_ref: Vec<f64>,
    pub ref_to_pred: Vec<f64>,
}

impl SurfaceDistances {
    pub fn assd(&self) -> f64 {
        // Sum each direction separately so swapping the masks is exact.
        let total = self.pred_to_ref.iter().sum::<f64>() + self.ref_to_pred.iter().sum::<f64>();
        total / (self.pred_to_ref.len() + self.ref_to_pred.len()) as f64
    }

    /// 95th percentile of the pooled directed distances.
    pub fn hd95(&self) -> f64 {
        let mut pooled: Vec<f64> = self.pred_to_ref.iter().chain(&self.ref_to_pred).copied().collect();
        pooled.sort_by(f64::total_cmp);
        percentile(&pooled, 95.0)
    }

    pub fn max(&self) -> f64 {
        self.pred_to_ref
            .iter()
            .chain(&self.ref_to_pred)
            .copied()
            .fold(0.0, f64::max)
    }
}

pub fn surface_distances(
    pred: &BinaryMask,
    reference: &BinaryMask,
    region: &BinaryMask,
) -> Result<Option<SurfaceDistances>, MetricsError> {
    let (p, r) = restrict(pred, reference, region)?;
    if p.spacing().is_none() && r.spacing().is_none() {
        return Err(MetricsError::Uncalibrated);
    }
    let spacing = p.spacing().or(r.spacing());
    let bp = boundary(&p).with_spacing(spacing)?;
    let br = boundary(&r).with_spacing(spacing)?;
    if bp.is_empty() || br.is_empty() {
        return Ok(None);
    }
    let to_r = edt(&br);
    let to_p = edt(&bp);
    let gather = |mask: &BinaryMask, field: &[f64]| -> Vec<f64> {
        mask.bits()
            .iter()
            .zip(field)
            .filter_map(|(&b, &d)| b.then_some(d))
            .collect()
    };
    Ok(Some(SurfaceDistances {
        pred_to_ref: gather(&bp, to_r.values()),
        ref_to_pred: gather(&br, to_p.values()),
    }))
}

/// Average symmetric surface distance in mm, `None` on an empty boundary.
pub fn masked_assd(
    pred: &BinaryMask,
    reference: &BinaryMask,
    region: &BinaryMask,
) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(pred, reference, region)?.map(|s| s.assd()))
}

/// HD95 in mm, `None` on an empty boundary.
pub fn masked_hd95(
    pred: &BinaryMask,
    reference: &BinaryMask,
    region: &BinaryMask,
) -> Result<Option<f64>, MetricsError> {
    Ok(surface_distances(pred, reference, region)?.map(|s| s.hd95()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub image_id: String,
    pub dice: f64,
    /// `null` when either boundary is empty.
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
    pub outlier: bool,
    pub band_mm: f64,
}

impl EvalReport {
    /// Builds a report from metric values, applying the outlier rule.
    pub fn new(
        image_id: impl Into<String>,
        dice: f64,
        assd: Option<f64>,
        hd95: Option<f64>,
        band_mm: f64,
        threshold_mm: f64,
    ) -> Self {
        Self {
            image_id: image_id.into(),
            dice,
            assd,
            hd95,
            outlier: assd.is_none_or(|a| a > threshold_mm),
            band_mm,
        }
    }
}

/// Region, then Dice/ASSD/HD95, then the outlier rule.
pub fn evaluate_pair(
    image_id: &str,
    pred: &BinaryMask,
    reference: &BinaryMask,
    band_mm: f64,
    threshold_mm: f64,
) -> Result<EvalReport, MetricsError> {
    check_pair(pred, reference)?;
    let region = evaluation_region(reference, band_mm)?;
    let dice = masked_dice(pred, reference, &region)?;
    let sd = surface_distances(pred, reference, &region)?;
    Ok(EvalReport::new(
        image_id,
        dice,
        sd.as_ref().map(|s| s.assd()),
        sd.as_ref().map(|s| s.hd95()),
        band_mm,
        threshold_mm,
    ))
}
