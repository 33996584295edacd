use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{file_err, write_json, PipelineError};
use crate::geometry::{
    detect_fiducials, perspective_correct, ransac_homography, resample_isotropic, scale_from_ruler, CalibrationSidecar,
    CalibrationSpec, FiducialTemplate, GeometryError, Homography, RansacParams, RulerCalibration,
};
use crate::raster::io::{read_image, sidecar_path, write_image, BitDepth};
use crate::raster::RasterImage;

/// `templates.json` inside a template directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplateSet {
    /// Marker centre of `fiducial_{i}.png` on the metric plane, mm.
    pub positions_mm: Vec<[f64; 2]>,
    pub scales: Vec<f64>,
    /// Minimum normalized cross-correlation of a detection.
    pub threshold: f64,
    pub ransac: RansacParams,
}

impl TemplateSet {
    pub fn standard(rect_mm: [f64; 2]) -> Self {
        let [w, h] = rect_mm;
        Self {
            positions_mm: vec![[0.0, 0.0], [w, 0.0], [w, h], [0.0, h]],
            scales: vec![0.85, 0.9, 0.95, 1.0, 1.05, 1.1, 1.15],
            threshold: 0.7,
            ransac: RansacParams::default(),
        }
    }

    fn load(dir: &Path, rect_mm: [f64; 2]) -> Result<(Self, Vec<FiducialTemplate>), PipelineError> {
        let json = dir.join("templates.json");
        let set = if json.is_file() {
            let text = fs::read_to_string(&json).map_err(file_err(&json))?;
            serde_json::from_str(&text).map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", json.display())))?
        } else {
            Self::standard(rect_mm)
        };
        let mut templates = Vec::with_capacity(set.positions_mm.len());
        for (i, p) in set.positions_mm.iter().enumerate() {
            let path = dir.join(format!("fiducial_{i}.png"));
            if !path.is_file() {
                return Err(PipelineError::CalibrationMissing(format!(
                    "template {} not found",
                    path.display()
                )));
            }
            let patch = read_image(&path, None)?;
            templates.push(FiducialTemplate::new(patch, (p[0], p[1]), set.scales.clone())?);
        }
        if templates.len() < 4 {
            return Err(PipelineError::InvalidInput(format!(
                "{} templates; a homography needs 4",
                templates.len()
            )));
        }
        Ok((set, templates))
    }
}

/// Writes the coded corner markers of a `rect_mm` rectangle as
/// `fiducial_{0..3}.png` plus `templates.json`.
pub fn write_templates(dir: &Path, rect_mm: [f64; 2], cell_px: usize) -> Result<TemplateSet, PipelineError> {
    fs::create_dir_all(dir).map_err(file_err(dir))?;
    let set = TemplateSet::standard(rect_mm);
    let templates = FiducialTemplate::standard_set(cell_px, rect_mm[0], rect_mm[1], &set.scales)?;
    for (i, t) in templates.iter().enumerate() {
        write_image(&dir.join(format!("fiducial_{i}.png")), &t.patch, BitDepth::Eight)?;
    }
    write_json(&dir.join("templates.json"), &set)?;
    Ok(set)
}

/// Local pixel size of a photo -> mm homography at the image centre.
fn local_scale(h: &Homography, height: usize, width: usize) -> Result<f64, GeometryError> {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    let map = |x: f64, y: f64| {
        h.apply(x, y)
            .ok_or_else(|| GeometryError::DegenerateConfiguration("image centre maps to infinity".into()))
    };
    let o = map(cx, cy)?;
    let ex = map(cx + 1.0, cy)?;
    let ey = map(cx, cy + 1.0)?;
    let area = ((ex.0 - o.0) * (ey.1 - o.1) - (ex.1 - o.1) * (ey.0 - o.0)).abs();
    Ok(area.sqrt())
}

/// Rectifies a raw photo. Ruler mode rescales isotropically; fiducial mode
/// detects the markers, fits a homography and resamples the metric plane.
/// Relative template paths resolve against `base_dir`.
pub fn calibrate_image(
    img: &RasterImage,
    spec: &CalibrationSpec,
    base_dir: &Path,
    target_mm: f64,
    margin_mm: f64,
) -> Result<(RasterImage, CalibrationSidecar), PipelineError> {
    match spec {
        CalibrationSpec::Ruler { p1, p2, distance_mm } => {
            let ruler = RulerCalibration {
                p1: (p1[0], p1[1]),
                p2: (p2[0], p2[1]),
                distance_mm: *distance_mm,
            };
            let scale = scale_from_ruler(&ruler)?;
            let out = resample_isotropic(img, scale, target_mm)?;
            let sidecar = CalibrationSidecar {
                spacing_mm: target_mm,
                homography: Homography::scale(scale),
                inliers: 2,
                transfer_error_px: 0.0,
                mode: "ruler".into(),
                source_spacing_mm: scale,
            };
            Ok((out, sidecar))
        }
        CalibrationSpec::Fiducial { templates, rect_mm } => {
            let dir = {
                let p = PathBuf::from(templates);
                if p.is_absolute() {
                    p
                } else {
                    base_dir.join(p)
                }
            };
            let (set, tpls) = TemplateSet::load(&dir, *rect_mm)?;
            let found = detect_fiducials(img, &tpls, set.threshold)?;
            let fit = ransac_homography(&found, &set.ransac)?;
            let out = perspective_correct(img, &fit.homography, target_mm, rect_mm[0], rect_mm[1], margin_mm)?;
            let source_spacing_mm = local_scale(&fit.homography, img.height(), img.width())?;
            let sidecar = CalibrationSidecar {
                spacing_mm: target_mm,
                homography: fit.homography,
                inliers: fit.inliers.len(),
                transfer_error_px: fit.mean_transfer_error,
                mode: "fiducial".into(),
                source_spacing_mm,
            };
            Ok((out, sidecar))
        }
    }
}

pub fn read_calibration(path: &Path) -> Result<CalibrationSpec, PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::CalibrationMissing(format!(
            "{} does not exist",
            path.display()
        )));
    }
    let text = fs::read_to_string(path).map_err(file_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::InvalidInput(format!("{}: {e}", path.display())))
}

/// Reads `raw`, calibrates it with the JSON spec at `calibration`, writes the
/// rectified PNG to `out` and the sidecar to `out` with a `.json` extension.
pub fn calibrate_file(
    raw: &Path,
    calibration: &Path,
    out: &Path,
    target_mm: f64,
    margin_mm: f64,
) -> Result<CalibrationSidecar, PipelineError> {
    let spec = read_calibration(calibration)?;
    let img = read_image(raw, None)?;
    let base = calibration.parent().unwrap_or_else(|| Path::new("."));
    let (rectified, sidecar) = calibrate_image(&img, &spec, base, target_mm, margin_mm)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(file_err(dir))?;
    }
    write_image(out, &rectified, BitDepth::Eight)?;
    write_json(&sidecar_path(out), &sidecar)?;
    Ok(sidecar)
}
