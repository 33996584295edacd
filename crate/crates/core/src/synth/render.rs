use std::f64::consts::TAU;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::layout::{FiducialPlacement, Label, LabelMap, RulerPlacement};
use super::{stream_rng, FiducialLayout, LabelColor, SynthConfig};
use crate::geometry::Homography;
use crate::raster::{BinaryMask, RasterImage};

const INK: f64 = 0.05;
const PAPER: f64 = 0.95;
const SUPERSAMPLE: usize = 4;

/// Per-image RGB means, one per rendered label class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Palette {
    pub background: [f64; 3],
    pub tissue: [f64; 3],
    pub rim: [f64; 3],
    pub distractor: [f64; 3],
}

fn draw_color(rng: &mut impl Rng, c: &LabelColor) -> [f64; 3] {
    c.mean.map(|m| {
        let v = if c.sigma > 0.0 {
            Normal::new(m, c.sigma).expect("finite sigma").sample(rng)
        } else {
            m
        };
        v.clamp(0.0, 1.0)
    })
}

/// The colours `render_photo` uses for `index`.
pub fn sample_palette(cfg: &SynthConfig, index: u64) -> Palette {
    let mut rng = stream_rng(cfg.seed, index, 2);
    let c = &cfg.contrast;
    Palette {
        background: draw_color(&mut rng, &c.background),
        tissue: draw_color(&mut rng, &c.tissue),
        rim: draw_color(&mut rng, &c.rim),
        distractor: draw_color(&mut rng, &c.distractor),
    }
}

/// Low-frequency multiplicative field with values in `[1 - amplitude, 1 + amplitude]`.
///
/// A convex combination of three plane cosines, each with between half a
/// cycle and two cycles across the canvas.
pub fn smooth_field(rng: &mut impl Rng, height: usize, width: usize, amplitude: f64) -> Vec<f64> {
    let size = height.max(width) as f64;
    let mut waves = Vec::with_capacity(3);
    let mut total = 0.0;
    for _ in 0..3 {
        let cycles = rng.random_range(0.5..2.0);
        let dir = rng.random_range(0.0..TAU);
        let weight = rng.random_range(0.2..1.0);
        let phase = rng.random_range(0.0..TAU);
        total += weight;
        waves.push((
            TAU * cycles * dir.cos() / size,
            TAU * cycles * dir.sin() / size,
            weight,
            phase,
        ));
    }
    let mut out = Vec::with_capacity(height * width);
    for r in 0..height {
        for c in 0..width {
            let v: f64 = waves
                .iter()
                .map(|&(kx, ky, wgt, ph)| wgt * (kx * c as f64 + ky * r as f64 + ph).cos())
                .sum();
            out.push(1.0 + amplitude * v / total);
        }
    }
    out
}

fn supersampled(r: usize, c: usize, s: f64, mut f: impl FnMut(f64, f64) -> f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..SUPERSAMPLE {
        for j in 0..SUPERSAMPLE {
            let dy = (i as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            let dx = (j as f64 + 0.5) / SUPERSAMPLE as f64 - 0.5;
            acc += f((c as f64 + dx) * s, (r as f64 + dy) * s);
        }
    }
    acc / (SUPERSAMPLE * SUPERSAMPLE) as f64
}

fn marker_value(fiducials: &[FiducialPlacement], x: f64, y: f64) -> f64 {
    match fiducials.iter().find_map(|f| f.cell_at(x, y)) {
        Some(true) => INK,
        _ => PAPER,
    }
}

fn ruler_value(ruler: &RulerPlacement, s: f64, x: f64, y: f64) -> f64 {
    let x0 = ruler.cols.0 as f64 * s;
    let y0 = (ruler.rows.0 as f64 - 0.5) * s;
    let height = (ruler.rows.1 - ruler.rows.0) as f64 * s;
    let k = ((x - x0) / ruler.tick_mm).round();
    let on_tick = (x - x0 - k * ruler.tick_mm).abs() < 0.1 && k >= 0.0;
    let length = if k % 10.0 == 0.0 {
        0.7
    } else if k % 5.0 == 0.0 {
        0.5
    } else {
        0.3
    };
    if on_tick && y - y0 < length * height {
        0.1
    } else {
        0.9
    }
}

fn gaussian_kernel(sigma_px: f64) -> Vec<f64> {
    let radius = (3.0 * sigma_px).ceil() as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma_px * sigma_px)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur of one plane with clamped edges.
fn blur_plane(plane: &mut [f64], h: usize, w: usize, kernel: &[f64]) {
    let radius = (kernel.len() / 2) as i64;
    let mut tmp = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            tmp[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * plane[r * w + (c as i64 + i as i64 - radius).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    for r in 0..h {
        for c in 0..w {
            plane[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * tmp[(r as i64 + i as i64 - radius).clamp(0, h as i64 - 1) as usize * w + c])
                .sum();
        }
    }
}

/// Renders an RGB photograph of `lm` and returns it with the tissue mask.
///
/// Tissue, rim and distractor share one illumination field; the background
/// gets its own weaker field. Fiducials and ruler are printed objects and
/// stay unmodulated.
pub fn render_photo(lm: &LabelMap, cfg: &SynthConfig, index: u64) -> (RasterImage, BinaryMask) {
    let palette = sample_palette(cfg, index);
    let mut rng = stream_rng(cfg.seed, index, 3);
    let (h, w, s) = (lm.height(), lm.width(), lm.spacing());
    let [m_lo, m_hi] = cfg.contrast.modulation;
    let amp = if m_hi > m_lo {
        rng.random_range(m_lo..=m_hi)
    } else {
        m_lo
    };
    let light = smooth_field(&mut rng, h, w, amp);
    let texture = smooth_field(&mut rng, h, w, amp / 2.0);
    let [b_lo, b_hi] = cfg.blur_sigma_mm;
    let blur_mm = if b_hi > b_lo {
        rng.random_range(b_lo..=b_hi)
    } else {
        b_lo
    };

    let mut data = vec![0.0; 3 * h * w];
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let label = lm.labels()[i];
            let (rgb, field) = match label {
                l if l == Label::Tissue as u8 => (palette.tissue, light[i]),
                l if l == Label::Rim as u8 => (palette.rim, light[i]),
                l if l == Label::Distractor as u8 => (palette.distractor, light[i]),
                l if l == Label::Fiducial as u8 => {
                    let v = supersampled(r, c, s, |x, y| marker_value(&lm.fiducials, x, y));
                    ([v; 3], 1.0)
                }
                l if l == Label::Ruler as u8 => {
                    let ruler = lm.ruler.as_ref().expect("ruler label implies placement");
                    let v = supersampled(r, c, s, |x, y| ruler_value(ruler, s, x, y));
                    ([v, v, v * 0.92], 1.0)
                }
                _ => (palette.background, texture[i]),
            };
            for ch in 0..3 {
                data[ch * h * w + i] = rgb[ch] * field;
            }
        }
    }

    if blur_mm / s > 0.05 {
        let kernel = gaussian_kernel(blur_mm / s);
        for plane in data.chunks_mut(h * w) {
            blur_plane(plane, h, w, &kernel);
        }
    }
    if cfg.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, cfg.noise_sigma).expect("finite noise sigma");
        for v in data.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let img = RasterImage::new(h, w, 3, data, Some(s)).expect("rendered image is well formed");
    (img, lm.reference_mask())
}

/// Photograph of a fiducial sheet seen through `photo_to_mm`.
///
/// Marker `i` is centred on corner `i` of the rectangle (TL, TR, BR, BL at
/// `(0,0)`, `(w,0)`, `(w,h)`, `(0,h)` mm) on a grey table. Each photo pixel is
/// supersampled through the homography, so the planted geometry is exact.
pub fn render_fiducial_photo(
    photo_to_mm: &Homography,
    height: usize,
    width: usize,
    layout: &FiducialLayout,
    noise_sigma: f64,
    seed: u64,
) -> RasterImage {
    let [rw, rh] = layout.rect_mm;
    let markers: Vec<FiducialPlacement> = [(0.0, 0.0), (rw, 0.0), (rw, rh), (0.0, rh)]
        .into_iter()
        .enumerate()
        .map(|(id, centre_mm)| FiducialPlacement {
            id,
            centre_mm,
            cell_mm: layout.cell_mm,
        })
        .collect();
    let mut rng = stream_rng(seed, 0, 4);
    let noise = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite noise sigma");
    let mut gray = vec![0.0; height * width];
    for r in 0..height {
        for c in 0..width {
            let v = supersampled(r, c, 1.0, |x, y| match photo_to_mm.apply(x, y) {
                Some((u, v)) => match markers.iter().find_map(|f| f.cell_at(u, v)) {
                    Some(true) => INK,
                    Some(false) => PAPER,
                    None => 0.35,
                },
                None => 0.35,
            });
            let n = if noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            gray[r * width + c] = (v + n).clamp(0.0, 1.0);
        }
    }
    let mut data = Vec::with_capacity(3 * height * width);
    for _ in 0..3 {
        data.extend_from_slice(&gray);
    }
    RasterImage::new(height, width, 3, data, None).expect("rendered image is well formed")
}
