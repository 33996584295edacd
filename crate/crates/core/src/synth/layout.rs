use std::f64::consts::TAU;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stream_rng, SynthConfig, SynthError};
use crate::geometry::MARKER_CELLS;
use crate::raster::{connected_components, edt, BinaryMask, Connectivity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Label {
    Background = 0,
    Tissue = 1,
    Rim = 2,
    Distractor = 3,
    Fiducial = 4,
    Ruler = 5,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiducialPlacement {
    pub id: usize,
    /// Marker centre, mm, in the frame where pixel `(r, c)` sits at `(c*s, r*s)`.
    pub centre_mm: (f64, f64),
    pub cell_mm: f64,
}

impl FiducialPlacement {
    /// Ink/paper cell at a point, or `None` outside the marker.
    pub fn cell_at(&self, x_mm: f64, y_mm: f64) -> Option<bool> {
        let half = MARKER_CELLS as f64 * self.cell_mm / 2.0;
        let u = (x_mm - self.centre_mm.0 + half) / self.cell_mm;
        let v = (y_mm - self.centre_mm.1 + half) / self.cell_mm;
        let n = MARKER_CELLS as f64;
        if u < 0.0 || v < 0.0 || u >= n || v >= n {
            return None;
        }
        Some(crate::geometry::marker_cell(self.id, v as usize, u as usize))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulerPlacement {
    /// Pixel rectangle `[row0, row1) x [col0, col1)`.
    pub rows: (usize, usize),
    pub cols: (usize, usize),
    pub tick_mm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    spacing: f64,
    labels: Vec<u8>,
    pub slab_count: usize,
    pub fiducials: Vec<FiducialPlacement>,
    pub ruler: Option<RulerPlacement>,
}

impl LabelMap {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, r: usize, c: usize) -> u8 {
        self.labels[r * self.width + c]
    }

    pub fn mask_of(&self, label: Label) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, Some(self.spacing), |r, c| {
            self.get(r, c) == label as u8
        })
    }

    /// Ground truth: slab tissue only, rim and distractor excluded.
    pub fn reference_mask(&self) -> BinaryMask {
        self.mask_of(Label::Tissue)
    }
}

/// Ellipse with a low-order Fourier perturbation of its radius.
struct Blob {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn sample(rng: &mut impl Rng, cfg: &SynthConfig) -> Self {
        let size = rng.random_range(cfg.slab_size_mm[0]..=cfg.slab_size_mm[1]);
        let aspect = rng.random_range(cfg.slab_aspect[0]..=cfg.slab_aspect[1]);
        let phi = rng.random_range(0.0..TAU);
        let rough = cfg.contour_roughness;
        let mut harmonics = [(0.0, 0.0); 3];
        for (i, h) in harmonics.iter_mut().enumerate() {
            // Amplitudes fall off with order; their sum stays below 1.
            let amp = if rough > 0.0 {
                rng.random_range(-rough..=rough) / (i + 1) as f64
            } else {
                0.0
            };
            *h = (amp, rng.random_range(0.0..TAU));
        }
        Self {
            cx: 0.0,
            cy: 0.0,
            a: size / 2.0,
            b: size / 2.0 * aspect,
            cos: phi.cos(),
            sin: phi.sin(),
            harmonics,
        }
    }

    /// Bounding radius around the centre.
    fn reach(&self) -> f64 {
        let extra: f64 = self.harmonics.iter().map(|h| h.0.abs()).sum();
        self.a * (1.0 + extra)
    }

    fn local(&self, x: f64, y: f64) -> (f64, f64) {
        let dx = x - self.cx;
        let dy = y - self.cy;
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (u, v) = self.local(x, y);
        let (p, q) = (u / self.a, v / self.b);
        let theta = q.atan2(p);
        let rho: f64 = 1.0
            + self
                .harmonics
                .iter()
                .enumerate()
                .map(|(i, &(amp, ph))| amp * ((i + 2) as f64 * theta + ph).cos())
                .sum::<f64>();
        p * p + q * q <= rho * rho
    }

    fn angle(&self, x: f64, y: f64) -> f64 {
        let (u, v) = self.local(x, y);
        v.atan2(u).rem_euclid(TAU)
    }
}

struct Canvas {
    h: usize,
    w: usize,
    s: f64,
    labels: Vec<u8>,
}

impl Canvas {
    fn occupied(&self) -> BinaryMask {
        BinaryMask::from_fn(self.h, self.w, Some(self.s), |r, c| self.labels[r * self.w + c] != 0)
    }

    fn xy(&self, r: usize, c: usize) -> (f64, f64) {
        (c as f64 * self.s, r as f64 * self.s)
    }

    /// Pixel box covering a disc of `reach` mm around `(cx, cy)`, clipped.
    fn bbox(&self, cx: f64, cy: f64, reach: f64) -> (usize, usize, usize, usize) {
        let clip = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        (
            clip(((cy - reach) / self.s).floor(), self.h),
            clip(((cy + reach) / self.s).ceil() + 1.0, self.h),
            clip(((cx - reach) / self.s).floor(), self.w),
            clip(((cx + reach) / self.s).ceil() + 1.0, self.w),
        )
    }
}

/// Deterministic scene layout for `(cfg.seed, index)`.
pub fn generate_label_map(cfg: &SynthConfig, index: u64) -> Result<LabelMap, SynthError> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, index, 1);
    let (h, w, s) = (cfg.height, cfg.width, cfg.spacing_mm);
    let mut canvas = Canvas {
        h,
        w,
        s,
        labels: vec![0; h * w],
    };
    let (width_mm, height_mm) = ((w - 1) as f64 * s, (h - 1) as f64 * s);

    let mut fiducials = Vec::new();
    if let Some(layout) = &cfg.fiducials {
        let x0 = (width_mm - layout.rect_mm[0]) / 2.0;
        let y0 = (height_mm - layout.rect_mm[1]) / 2.0;
        let corners = [
            (0.0, 0.0),
            (layout.rect_mm[0], 0.0),
            layout.rect_mm.into(),
            (0.0, layout.rect_mm[1]),
        ];
        for (id, (dx, dy)) in corners.into_iter().enumerate() {
            let f = FiducialPlacement {
                id,
                centre_mm: (x0 + dx, y0 + dy),
                cell_mm: layout.cell_mm,
            };
            let half = MARKER_CELLS as f64 * f.cell_mm / 2.0;
            let (r0, r1, c0, c1) = canvas.bbox(f.centre_mm.0, f.centre_mm.1, half);
            for r in r0..r1 {
                for c in c0..c1 {
                    let (x, y) = canvas.xy(r, c);
                    if (x - f.centre_mm.0).abs() <= half && (y - f.centre_mm.1).abs() <= half {
                        canvas.labels[r * w + c] = Label::Fiducial as u8;
                    }
                }
            }
            fiducials.push(f);
        }
    }

    let ruler = cfg.ruler.then(|| {
        let rows = ((6.0 / s).ceil() as usize).clamp(2, h / 4);
        let margin = (2.0 / s).round() as usize;
        let placement = RulerPlacement {
            rows: (h - 1 - rows, h - 1),
            cols: (margin.min(w / 4), w - margin.min(w / 4)),
            tick_mm: 1.0,
        };
        for r in placement.rows.0..placement.rows.1 {
            for c in placement.cols.0..placement.cols.1 {
                canvas.labels[r * w + c] = Label::Ruler as u8;
            }
        }
        placement
    });

    let n_slabs = rng.random_range(cfg.slabs_per_image[0]..=cfg.slabs_per_image[1]);
    for slab in 0..n_slabs {
        place_slab(&mut canvas, &mut rng, cfg, slab)?;
    }

    if rng.random_bool(cfg.distractor_probability) {
        place_distractor(&mut canvas, &mut rng, cfg);
    }

    Ok(LabelMap {
        height: h,
        width: w,
        spacing: s,
        labels: canvas.labels,
        slab_count: n_slabs,
        fiducials,
        ruler,
    })
}

fn place_slab(canvas: &mut Canvas, rng: &mut impl Rng, cfg: &SynthConfig, slab: usize) -> Result<(), SynthError> {
    let (h, w, s) = (canvas.h, canvas.w, canvas.s);
    let clearance = edt(&canvas.occupied());
    for _ in 0..cfg.max_attempts {
        let mut blob = Blob::sample(rng, cfg);
        let rim_t = rng.random_range(cfg.rim_thickness_mm[0]..=cfg.rim_thickness_mm[1]);
        let coverage = rng.random_range(cfg.rim_coverage[0]..=cfg.rim_coverage[1]);
        let start = rng.random_range(0.0..TAU);
        // Keep one pixel of background on every side.
        let reach = blob.reach() + rim_t + s;
        let (xmax, ymax) = ((w - 1) as f64 * s - reach, (h - 1) as f64 * s - reach);
        let (cx, cy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        if xmax < reach || ymax < reach {
            continue;
        }
        blob.cx = reach + cx * (xmax - reach);
        blob.cy = reach + cy * (ymax - reach);

        let (r0, r1, c0, c1) = canvas.bbox(blob.cx, blob.cy, reach);
        let (bh, bw) = (r1 - r0, c1 - c0);
        let tissue = BinaryMask::from_fn(bh, bw, Some(s), |r, c| {
            let (x, y) = canvas.xy(r0 + r, c0 + c);
            blob.contains(x, y)
        });
        if tissue.is_empty() {
            continue;
        }
        let dist = edt(&tissue);
        let in_arc = |x: f64, y: f64| (blob.angle(x, y) - start).rem_euclid(TAU) < coverage * TAU;
        let rim = BinaryMask::from_fn(bh, bw, Some(s), |r, c| {
            let d = dist.get(r, c);
            let (x, y) = canvas.xy(r0 + r, c0 + c);
            d > 0.0 && d <= rim_t && in_arc(x, y)
        });
        let rim = attached_rim(&tissue, &rim);

        let footprint = tissue.or(&rim).expect("same dims");
        let clear = (0..bh)
            .all(|r| (0..bw).all(|c| !footprint.get(r, c) || clearance.get(r0 + r, c0 + c) > cfg.gap_mm.max(s * 0.5)));
        if !clear {
            continue;
        }
        for r in 0..bh {
            for c in 0..bw {
                let label = if tissue.get(r, c) {
                    Label::Tissue
                } else if rim.get(r, c) {
                    Label::Rim
                } else {
                    continue;
                };
                canvas.labels[(r0 + r) * w + c0 + c] = label as u8;
            }
        }
        return Ok(());
    }
    Err(SynthError::PlacementFailure {
        slab,
        attempts: cfg.max_attempts,
    })
}

/// Drops rim fragments that do not touch the tissue.
fn attached_rim(tissue: &BinaryMask, rim: &BinaryMask) -> BinaryMask {
    let (h, w) = rim.dims();
    let comps = connected_components(rim, Connectivity::Four);
    let mut touching = vec![false; comps.count as usize + 1];
    for r in 0..h {
        for c in 0..w {
            let l = comps.get(r, c);
            if l == 0 || touching[l as usize] {
                continue;
            }
            let nbrs = [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)];
            if nbrs.iter().any(|&(nr, nc)| nr < h && nc < w && tissue.get(nr, nc)) {
                touching[l as usize] = true;
            }
        }
    }
    BinaryMask::from_fn(h, w, rim.spacing(), |r, c| touching[comps.get(r, c) as usize])
}

/// Best-effort: a non-target blob hugging one image border, partly cut off.
fn place_distractor(canvas: &mut Canvas, rng: &mut impl Rng, cfg: &SynthConfig) {
    let (h, w, s) = (canvas.h, canvas.w, canvas.s);
    let clearance = edt(&canvas.occupied());
    let (width_mm, height_mm) = ((w - 1) as f64 * s, (h - 1) as f64 * s);
    for _ in 0..cfg.max_attempts {
        let mut blob = Blob::sample(rng, cfg);
        let reach = blob.reach();
        let inset = rng.random_range(-0.3..0.5) * reach;
        let along = rng.random_range(0.0..1.0);
        match rng.random_range(0..4) {
            0 => (blob.cx, blob.cy) = (along * width_mm, inset),
            1 => (blob.cx, blob.cy) = (width_mm - inset, along * height_mm),
            2 => (blob.cx, blob.cy) = (along * width_mm, height_mm - inset),
            _ => (blob.cx, blob.cy) = (inset, along * height_mm),
        }
        let (r0, r1, c0, c1) = canvas.bbox(blob.cx, blob.cy, reach);
        let mut cells = Vec::new();
        let mut clear = true;
        for r in r0..r1 {
            for c in c0..c1 {
                let (x, y) = canvas.xy(r, c);
                if blob.contains(x, y) {
                    if clearance.get(r, c) <= cfg.gap_mm.max(s * 0.5) {
                        clear = false;
                    }
                    cells.push(r * w + c);
                }
            }
        }
        if clear && !cells.is_empty() {
            for i in cells {
                canvas.labels[i] = Label::Distractor as u8;
            }
            return;
        }
    }
}
