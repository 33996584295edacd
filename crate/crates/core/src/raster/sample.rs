use super::{RasterError, RasterImage};
use crate::geometry::Homography;

/// Bilinear sample of every channel at `(x, y)` with zero fill outside the image.
pub fn bilinear_sample(img: &RasterImage, x: f64, y: f64) -> Vec<f64> {
    bilinear_sample_with_fill(img, x, y, 0.0)
}

/// Bilinear sample with an explicit out-of-bounds fill value.
///
/// A point is inside when it lies within the footprint of the outermost pixels,
/// i.e. `x` in `[-0.5, W - 0.5]` and `y` in `[-0.5, H - 0.5]`; the half-pixel
/// rim beyond the outer pixel centres is clamped to the edge value.
pub fn bilinear_sample_with_fill(img: &RasterImage, x: f64, y: f64, fill: f64) -> Vec<f64> {
    let (h, w) = img.dims();
    let mut out = vec![fill; img.channels()];
    if !(x >= -0.5 && y >= -0.5 && x <= w as f64 - 0.5 && y <= h as f64 - 0.5) {
        return out;
    }
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    for (c, v) in out.iter_mut().enumerate() {
        let p = img.plane(c);
        let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
        let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
        *v = top * (1.0 - fy) + bottom * fy;
    }
    out
}

/// Resamples `img` into an `out_h x out_w` grid where `transform` maps input
/// pixel coordinates to output pixel coordinates.
pub fn warp(
    img: &RasterImage,
    transform: &Homography,
    out_h: usize,
    out_w: usize,
    out_spacing: Option<f64>,
) -> Result<RasterImage, RasterError> {
    if out_h == 0 || out_w == 0 {
        return Err(RasterError::EmptyOutput(out_h, out_w));
    }
    let inverse = transform
        .inverse()
        .map_err(|_| RasterError::NonInvertibleTransform(transform.det().abs()))?;
    warp_with_inverse(img, &inverse, out_h, out_w, out_spacing, 0.0)
}

pub(crate) fn warp_with_inverse(
    img: &RasterImage,
    inverse: &Homography,
    out_h: usize,
    out_w: usize,
    out_spacing: Option<f64>,
    fill: f64,
) -> Result<RasterImage, RasterError> {
    let channels = img.channels();
    let n = out_h * out_w;
    let mut data = vec![fill; n * channels];
    for r in 0..out_h {
        for c in 0..out_w {
            let Some((x, y)) = inverse.apply(c as f64, r as f64) else {
                continue;
            };
            let v = bilinear_sample_with_fill(img, x, y, fill);
            for (ch, value) in v.into_iter().enumerate() {
                data[ch * n + r * out_w + c] = value;
            }
        }
    }
    RasterImage::new(out_h, out_w, channels, data, out_spacing)
}
