//! Procedural slab scenes with ground-truth masks and randomized contrast.
//!
//! A scene is first laid out as a [`LabelMap`] (slab faces wrapped by a partial
//! cortical rim, optional distractor slab, fiducials and ruler), then rendered
//! with per-image colours, smooth intensity fields, blur and noise. Everything
//! is a pure function of `(seed, index)`.

mod dataset;
mod layout;
mod render;

pub use dataset::{make_dataset, DatasetEntry, DatasetManifest};
pub use layout::{generate_label_map, FiducialPlacement, Label, LabelMap, RulerPlacement};
pub use render::{render_fiducial_photo, render_photo, sample_palette, smooth_field, Palette};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::raster::io::IoError;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth config: {0}")]
    InvalidConfig(String),
    #[error("could not place slab {slab} after {attempts} attempts (overcrowded config)")]
    PlacementFailure { slab: usize, attempts: usize },
    #[error("I/O failure: {0}")]
    IoFailure(String),
}

impl From<IoError> for SynthError {
    fn from(e: IoError) -> Self {
        SynthError::IoFailure(e.to_string())
    }
}

impl From<std::io::Error> for SynthError {
    fn from(e: std::io::Error) -> Self {
        SynthError::IoFailure(e.to_string())
    }
}

/// Inclusive `[min, max]` range.
pub type Range = [f64; 2];

/// Per-label colour model: each channel mean is drawn from N(mean, sigma) and
/// clipped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelColor {
    pub mean: [f64; 3],
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContrastModel {
    pub background: LabelColor,
    pub tissue: LabelColor,
    pub rim: LabelColor,
    pub distractor: LabelColor,
    /// Amplitude range of the multiplicative smooth field; 0.3 gives factors in [0.7, 1.3].
    pub modulation: Range,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FiducialLayout {
    /// Rectangle whose corners carry the marker centres, mm.
    pub rect_mm: [f64; 2],
    /// Marker cell size, mm (markers are 7 cells wide).
    pub cell_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub spacing_mm: f64,
    /// Inclusive slab-count range.
    pub slabs_per_image: [usize; 2],
    /// Major diameter of a slab face, mm.
    pub slab_size_mm: Range,
    /// Minor/major axis ratio.
    pub slab_aspect: Range,
    /// Relative amplitude of the Fourier contour perturbation.
    pub contour_roughness: f64,
    pub rim_thickness_mm: Range,
    /// Fraction of the slab perimeter covered by rim.
    pub rim_coverage: Range,
    /// Minimum clearance between placed objects, mm.
    pub gap_mm: f64,
    pub distractor_probability: f64,
    pub contrast: ContrastModel,
    /// Additive Gaussian noise, intensity units.
    pub noise_sigma: f64,
    pub blur_sigma_mm: Range,
    pub fiducials: Option<FiducialLayout>,
    pub ruler: bool,
    pub max_attempts: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 128,
            width: 128,
            spacing_mm: 0.5,
            slabs_per_image: [1, 3],
            slab_size_mm: [12.0, 26.0],
            slab_aspect: [0.6, 0.95],
            contour_roughness: 0.08,
            rim_thickness_mm: [1.0, 2.5],
            rim_coverage: [0.3, 0.8],
            gap_mm: 1.5,
            distractor_probability: 0.3,
            contrast: ContrastModel {
                background: LabelColor {
                    mean: [0.12, 0.12, 0.15],
                    sigma: 0.04,
                },
                tissue: LabelColor {
                    mean: [0.80, 0.72, 0.64],
                    sigma: 0.05,
                },
                rim: LabelColor {
                    mean: [0.62, 0.44, 0.42],
                    sigma: 0.05,
                },
                distractor: LabelColor {
                    mean: [0.62, 0.62, 0.50],
                    sigma: 0.05,
                },
                modulation: [0.0, 0.3],
            },
            noise_sigma: 0.02,
            blur_sigma_mm: [0.0, 0.4],
            fiducials: None,
            ruler: false,
            max_attempts: 200,
        }
    }
}

fn check_range(name: &str, r: Range, lo: f64, hi: f64) -> Result<(), SynthError> {
    if r[0].is_finite() && r[1].is_finite() && r[0] <= r[1] && r[0] >= lo && r[1] <= hi {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!("{name} = {r:?}")))
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.height < 8 || self.width < 8 {
            return bad(format!("canvas {}x{}", self.height, self.width));
        }
        if !(self.spacing_mm > 0.0 && self.spacing_mm.is_finite()) {
            return bad(format!("spacing_mm = {}", self.spacing_mm));
        }
        let [lo, hi] = self.slabs_per_image;
        if lo == 0 || lo > hi || hi > 4 {
            return bad(format!("slabs_per_image = {:?}", self.slabs_per_image));
        }
        check_range("slab_size_mm", self.slab_size_mm, 1e-6, f64::MAX)?;
        check_range("slab_aspect", self.slab_aspect, 1e-3, 1.0)?;
        check_range("rim_thickness_mm", self.rim_thickness_mm, 0.0, f64::MAX)?;
        check_range("rim_coverage", self.rim_coverage, 0.0, 1.0)?;
        check_range("blur_sigma_mm", self.blur_sigma_mm, 0.0, f64::MAX)?;
        check_range("contrast.modulation", self.contrast.modulation, 0.0, 0.3)?;
        if !(0.0..=1.0).contains(&self.distractor_probability) {
            return bad(format!("distractor_probability = {}", self.distractor_probability));
        }
        if !(0.0..0.5).contains(&self.contour_roughness) {
            return bad(format!("contour_roughness = {}", self.contour_roughness));
        }
        if !(self.noise_sigma >= 0.0) || !(self.gap_mm >= 0.0) || self.max_attempts == 0 {
            return bad("noise_sigma, gap_mm must be >= 0 and max_attempts > 0".into());
        }
        for c in [
            &self.contrast.background,
            &self.contrast.tissue,
            &self.contrast.rim,
            &self.contrast.distractor,
        ] {
            if !(c.sigma >= 0.0) || c.mean.iter().any(|m| !(0.0..=1.0).contains(m)) {
                return bad(format!("colour {c:?}"));
            }
        }
        if let Some(f) = &self.fiducials {
            if !(f.cell_mm > 0.0 && f.rect_mm[0] > 0.0 && f.rect_mm[1] > 0.0) {
                return bad(format!("fiducials {f:?}"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Independent generator per `(seed, index, purpose)`.
pub(crate) fn stream_rng(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}
