//! Fiducial detection by multi-scale normalized cross-correlation.
//!
//! Each marker is a 7x7 grid of cells: a white quiet zone around a 5x5 code
//! that differs per rectangle corner, so every template matches only its own
//! corner.

use super::{GeometryError, PointCorrespondence};
use crate::raster::{bilinear_sample, RasterImage};

/// Side length of a marker, in cells.
pub const MARKER_CELLS: usize = 7;

// 1 = paper, 0 = ink. Chosen by random search to keep the cross-correlation
// between different markers low at every cell-aligned offset.
const CODES: [[[u8; 5]; 5]; 4] = [
    [
        [0, 1, 1, 0, 1],
        [1, 0, 1, 0, 0],
        [0, 0, 1, 1, 1],
        [0, 1, 1, 1, 0],
        [1, 0, 0, 1, 0],
    ],
    [
        [0, 0, 1, 0, 1],
        [1, 1, 0, 1, 0],
        [0, 0, 1, 1, 1],
        [0, 0, 0, 0, 1],
        [0, 1, 0, 1, 0],
    ],
    [
        [0, 1, 0, 1, 1],
        [1, 0, 1, 1, 0],
        [0, 1, 0, 0, 1],
        [1, 1, 0, 1, 0],
        [1, 1, 1, 1, 0],
    ],
    [
        [1, 0, 0, 1, 0],
        [1, 1, 0, 0, 0],
        [0, 0, 1, 1, 1],
        [0, 1, 1, 0, 1],
        [1, 0, 1, 1, 0],
    ],
];

/// `true` where marker `id` (0..4, corner order TL, TR, BR, BL) carries ink.
/// The outermost ring of cells is a paper quiet zone.
pub fn marker_cell(id: usize, row: usize, col: usize) -> bool {
    let last = MARKER_CELLS - 1;
    if row == 0 || col == 0 || row >= last || col >= last {
        return false;
    }
    CODES[id % 4][row - 1][col - 1] == 0
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiducialTemplate {
    /// Grayscale appearance of the marker, centred on its nominal position.
    pub patch: RasterImage,
    /// Marker centre in the rectified plane, mm.
    pub position_mm: (f64, f64),
    /// Relative template scales searched during detection.
    pub scales: Vec<f64>,
}

impl FiducialTemplate {
    pub fn new(patch: RasterImage, position_mm: (f64, f64), scales: Vec<f64>) -> Result<Self, GeometryError> {
        if patch.height() < 8 || patch.width() < 8 {
            return Err(GeometryError::InvalidParameter(format!(
                "template patch {}x{} is smaller than 8x8",
                patch.height(),
                patch.width()
            )));
        }
        if scales.is_empty() || scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(GeometryError::InvalidParameter(format!("scales {scales:?}")));
        }
        Ok(Self {
            patch: patch.luminance(),
            position_mm,
            scales,
        })
    }

    /// The coded marker `id` rendered at `cell_px` pixels per cell.
    pub fn coded(id: usize, cell_px: usize, position_mm: (f64, f64), scales: Vec<f64>) -> Result<Self, GeometryError> {
        let n = MARKER_CELLS * cell_px;
        let patch = RasterImage::from_fn(n, n, 1, None, |_, r, c| {
            if marker_cell(id, r / cell_px, c / cell_px) {
                0.05
            } else {
                0.95
            }
        })?;
        Self::new(patch, position_mm, scales)
    }

    /// The four corner templates of a `rect_w x rect_h` mm fiducial rectangle.
    pub fn standard_set(cell_px: usize, rect_w: f64, rect_h: f64, scales: &[f64]) -> Result<Vec<Self>, GeometryError> {
        let corners = [(0.0, 0.0), (rect_w, 0.0), (rect_w, rect_h), (0.0, rect_h)];
        corners
            .iter()
            .enumerate()
            .map(|(id, &p)| Self::coded(id, cell_px, p, scales.to_vec()))
            .collect()
    }

    fn scaled(&self, scale: f64) -> Option<(Vec<f64>, usize, usize)> {
        let k_h = (self.patch.height() as f64 * scale).round() as usize;
        let k_w = (self.patch.width() as f64 * scale).round() as usize;
        if k_h < 3 || k_w < 3 {
            return None;
        }
        let sy = self.patch.height() as f64 / k_h as f64;
        let sx = self.patch.width() as f64 / k_w as f64;
        let mut out = Vec::with_capacity(k_h * k_w);
        for r in 0..k_h {
            for c in 0..k_w {
                let y = (r as f64 + 0.5) * sy - 0.5;
                let x = (c as f64 + 0.5) * sx - 0.5;
                out.push(bilinear_sample(&self.patch, x, y)[0]);
            }
        }
        Some((out, k_h, k_w))
    }
}

#[derive(Debug, Clone, Copy)]
struct Peak {
    x: f64,
    y: f64,
    score: f64,
    radius: f64,
}

/// Normalized cross-correlation of a zero-mean template over every valid
/// placement. Returns `(scores, out_h, out_w)` indexed by the top-left corner.
fn ncc_map(img: &[f64], h: usize, w: usize, tpl: &[f64], th: usize, tw: usize) -> Option<(Vec<f64>, usize, usize)> {
    if th > h || tw > w {
        return None;
    }
    let n = (th * tw) as f64;
    let t_mean = tpl.iter().sum::<f64>() / n;
    let t0: Vec<f64> = tpl.iter().map(|v| v - t_mean).collect();
    let t_norm = t0.iter().map(|v| v * v).sum::<f64>().sqrt();
    if t_norm < 1e-12 {
        return None;
    }
    // Integral images of I and I^2 for window statistics.
    let iw = w + 1;
    let mut s1 = vec![0.0; (h + 1) * iw];
    let mut s2 = vec![0.0; (h + 1) * iw];
    for r in 0..h {
        let mut a = 0.0;
        let mut b = 0.0;
        for c in 0..w {
            let v = img[r * w + c];
            a += v;
            b += v * v;
            s1[(r + 1) * iw + c + 1] = s1[r * iw + c + 1] + a;
            s2[(r + 1) * iw + c + 1] = s2[r * iw + c + 1] + b;
        }
    }
    let rect = |s: &[f64], r: usize, c: usize| {
        s[(r + th) * iw + c + tw] - s[r * iw + c + tw] - s[(r + th) * iw + c] + s[r * iw + c]
    };
    let oh = h - th + 1;
    let ow = w - tw + 1;
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let sum = rect(&s1, r, c);
            let var = rect(&s2, r, c) - sum * sum / n;
            if var <= 1e-9 * n {
                continue;
            }
            let mut acc = 0.0;
            for tr in 0..th {
                let row = &img[(r + tr) * w + c..(r + tr) * w + c + tw];
                let trow = &t0[tr * tw..(tr + 1) * tw];
                acc += row.iter().zip(trow).map(|(a, b)| a * b).sum::<f64>();
            }
            out[r * ow + c] = acc / (t_norm * var.sqrt());
        }
    }
    Some((out, oh, ow))
}

fn parabolic_offset(left: f64, centre: f64, right: f64) -> f64 {
    let denom = left - 2.0 * centre + right;
    if denom.abs() < 1e-12 {
        0.0
    } else {
        (0.5 * (left - right) / denom).clamp(-0.5, 0.5)
    }
}

/// Finds all local NCC maxima above `threshold` for each template.
///
/// Candidates from every scale are merged with greedy non-maximum suppression
/// per template; more than four correspondences are normal and are left for
/// the robust estimator to sort out.
pub fn detect_fiducials(
    img: &RasterImage,
    templates: &[FiducialTemplate],
    threshold: f64,
) -> Result<Vec<PointCorrespondence>, GeometryError> {
    let gray = img.luminance();
    let (h, w) = gray.dims();
    let data = gray.data();
    let mut out = Vec::new();
    for tpl in templates {
        let mut peaks: Vec<Peak> = Vec::new();
        for &scale in &tpl.scales {
            let Some((patch, th, tw)) = tpl.scaled(scale) else {
                continue;
            };
            let Some((scores, oh, ow)) = ncc_map(data, h, w, &patch, th, tw) else {
                continue;
            };
            for r in 0..oh {
                for c in 0..ow {
                    let s = scores[r * ow + c];
                    if s < threshold {
                        continue;
                    }
                    let mut is_max = true;
                    'nb: for dr in -1i64..=1 {
                        for dc in -1i64..=1 {
                            if dr == 0 && dc == 0 {
                                continue;
                            }
                            let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                            if nr < 0 || nc < 0 || nr >= oh as i64 || nc >= ow as i64 {
                                continue;
                            }
                            let ns = scores[nr as usize * ow + nc as usize];
                            // Ties resolve towards the first in scan order.
                            if ns > s || (ns == s && (dr < 0 || (dr == 0 && dc < 0))) {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                    if !is_max {
                        continue;
                    }
                    let at = |rr: usize, cc: usize| scores[rr * ow + cc];
                    let dx = if c > 0 && c + 1 < ow {
                        parabolic_offset(at(r, c - 1), s, at(r, c + 1))
                    } else {
                        0.0
                    };
                    let dy = if r > 0 && r + 1 < oh {
                        parabolic_offset(at(r - 1, c), s, at(r + 1, c))
                    } else {
                        0.0
                    };
                    peaks.push(Peak {
                        x: c as f64 + dx + (tw as f64 - 1.0) / 2.0,
                        y: r as f64 + dy + (th as f64 - 1.0) / 2.0,
                        score: s,
                        radius: th.min(tw) as f64 / 2.0,
                    });
                }
            }
        }
        peaks.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then(a.y.total_cmp(&b.y))
                .then(a.x.total_cmp(&b.x))
        });
        let mut kept: Vec<Peak> = Vec::new();
        for p in peaks {
            let close = kept
                .iter()
                .any(|k| (k.x - p.x).powi(2) + (k.y - p.y).powi(2) < k.radius.max(p.radius).powi(2));
            if !close {
                kept.push(p);
            }
        }
        for p in kept {
            out.push(PointCorrespondence::new(
                (p.x, p.y),
                tpl.position_mm,
                p.score.clamp(0.0, 1.0),
            )?);
        }
    }
    if out.is_empty() {
        return Err(GeometryError::NoCandidates);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_distinct_under_ncc() {
        let set = FiducialTemplate::standard_set(3, 100.0, 80.0, &[1.0]).unwrap();
        for (i, a) in set.iter().enumerate() {
            for (j, b) in set.iter().enumerate() {
                let n = a.patch.height();
                let (s, _, _) = ncc_map(a.patch.data(), n, n, b.patch.data(), n, n).unwrap();
                if i == j {
                    assert!((s[0] - 1.0).abs() < 1e-9);
                } else {
                    assert!(s[0] < 0.7, "templates {i} and {j} correlate at {}", s[0]);
                }
            }
        }
    }

    #[test]
    fn blank_image_has_no_candidates() {
        let img = RasterImage::filled(60, 60, 1, 0.5, None);
        let set = FiducialTemplate::standard_set(3, 10.0, 10.0, &[1.0]).unwrap();
        assert_eq!(detect_fiducials(&img, &set, 0.7), Err(GeometryError::NoCandidates));
    }

    #[test]
    fn small_patch_rejected() {
        let patch = RasterImage::filled(5, 5, 1, 0.5, None);
        assert!(FiducialTemplate::new(patch, (0.0, 0.0), vec![1.0]).is_err());
    }
}
