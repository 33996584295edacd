use super::net::unet_forward;
use super::{Real, UNetError, UNetParams};
use crate::raster::{connected_components, fill_holes, BinaryMask, Connectivity, RasterImage};

/// Per-pixel foreground probability, `softmax(z)[1] = sigmoid(z1 - z0)`.
pub fn foreground_probability<T: Real>(p: &UNetParams<T>, img: &RasterImage) -> Result<Vec<f64>, UNetError> {
    let logits = unet_forward(p, img)?;
    let n = logits.h * logits.w;
    Ok((0..n)
        .map(|i| 1.0 / (1.0 + (logits.data[i].f64() - logits.data[n + i].f64()).exp()))
        .collect())
}

fn threshold_mask(img: &RasterImage, prob: &[f64]) -> BinaryMask {
    BinaryMask::new(
        img.height(),
        img.width(),
        prob.iter().map(|&p| p > 0.5).collect(),
        img.spacing(),
    )
    .expect("probability map has image dimensions")
}

/// Argmax segmentation; ties go to background.
pub fn predict<T: Real>(p: &UNetParams<T>, img: &RasterImage) -> Result<BinaryMask, UNetError> {
    Ok(threshold_mask(img, &foreground_probability(p, img)?))
}

/// Mean of the member softmax outputs, then argmax.
pub fn predict_ensemble<T: Real>(members: &[UNetParams<T>], img: &RasterImage) -> Result<BinaryMask, UNetError> {
    let Some((first, rest)) = members.split_first() else {
        return Err(UNetError::InvalidConfig("ensemble has no members".into()));
    };
    let mut mean = foreground_probability(first, img)?;
    for m in rest {
        for (a, b) in mean.iter_mut().zip(foreground_probability(m, img)?) {
            *a += b;
        }
    }
    let k = members.len() as f64;
    mean.iter_mut().for_each(|v| *v /= k);
    Ok(threshold_mask(img, &mean))
}

/// Otsu threshold over a 256-bin histogram; `None` for a constant input.
/// Foreground is `value > threshold`.
pub fn otsu_threshold(values: &[f64]) -> Option<f64> {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &v| (l.min(v), h.max(v)));
    if !(hi - lo > 1e-12) {
        return None;
    }
    const BINS: usize = 256;
    let width = (hi - lo) / BINS as f64;
    let mut hist = [0usize; BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &n)| i as f64 * n as f64).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_k) = (-1.0, 0);
    for (k, &n) in hist.iter().enumerate().take(BINS - 1) {
        w0 += n as f64;
        sum0 += k as f64 * n as f64;
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let d = sum0 / w0 - (sum_all - sum0) / w1;
        let between = w0 * w1 * d * d;
        if between > best {
            best = between;
            best_k = k;
        }
    }
    Some(lo + (best_k + 1) as f64 * width)
}

/// Otsu on luminance, keeping the side that touches the image border less,
/// then the largest 8-connected component with holes filled.
pub fn classical_baseline(img: &RasterImage) -> BinaryMask {
    let (h, w) = img.dims();
    let lum = img.luminance();
    let values = lum.plane(0);
    let Some(t) = otsu_threshold(values) else {
        return BinaryMask::empty(h, w, img.spacing());
    };
    let bright = BinaryMask::new(h, w, values.iter().map(|&v| v > t).collect(), img.spacing())
        .expect("luminance has image dimensions");
    let border = (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| r == 0 || c == 0 || r + 1 == h || c + 1 == w);
    let (bright_border, total_border) = border.fold((0usize, 0usize), |(b, n), (r, c)| {
        (b + bright.get(r, c) as usize, n + 1)
    });
    let fg = if 2 * bright_border > total_border {
        BinaryMask::new(h, w, bright.bits().iter().map(|b| !b).collect(), img.spacing()).expect("same dimensions")
    } else {
        bright
    };
    let labels = connected_components(&fg, Connectivity::Eight);
    let sizes = labels.sizes();
    let Some(largest) = (1..sizes.len()).max_by_key(|&l| (sizes[l], std::cmp::Reverse(l))) else {
        return BinaryMask::empty(h, w, img.spacing());
    };
    fill_holes(&labels.mask_of(largest as u32, img.spacing()))
}
