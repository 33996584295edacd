//! Exact Euclidean distance transform.
//!
//! Two separable passes: a 1D scan per column giving the vertical distance to
//! the nearest source pixel, then the lower envelope of parabolas per row
//! (Felzenszwalb & Huttenlocher). Squared distances stay integral, so the
//! result is exact rather than chamfer-approximate.

use super::{BinaryMask, DistanceField};

/// Squared pixel distance to the nearest set pixel, `None` when the mask is empty.
pub fn squared_edt_px(mask: &BinaryMask) -> Option<Vec<u64>> {
    let (h, w) = mask.dims();
    if mask.is_empty() {
        return None;
    }

    // Column pass: vertical distance to nearest foreground, or None.
    let mut vert: Vec<Option<u64>> = vec![None; h * w];
    for c in 0..w {
        let mut last: Option<usize> = None;
        for r in 0..h {
            if mask.get(r, c) {
                last = Some(r);
            }
            vert[r * w + c] = last.map(|l| (r - l) as u64);
        }
        let mut next: Option<usize> = None;
        for r in (0..h).rev() {
            if mask.get(r, c) {
                next = Some(r);
            }
            if let Some(n) = next {
                let d = (n - r) as u64;
                let slot = &mut vert[r * w + c];
                *slot = Some(slot.map_or(d, |v| v.min(d)));
            }
        }
    }

    // Row pass: lower envelope of parabolas (x - k)^2 + g(k)^2.
    let mut out = vec![0u64; h * w];
    let mut sites: Vec<usize> = Vec::with_capacity(w);
    let mut bounds: Vec<f64> = Vec::with_capacity(w + 1);
    for r in 0..h {
        let row = &vert[r * w..(r + 1) * w];
        let f = |k: usize| -> i64 {
            let g = row[k].expect("only finite sites enter the envelope") as i64;
            g * g
        };
        sites.clear();
        bounds.clear();
        for (k, g) in row.iter().enumerate() {
            if g.is_none() {
                continue;
            }
            loop {
                match sites.last() {
                    None => {
                        sites.push(k);
                        bounds.push(f64::NEG_INFINITY);
                        break;
                    }
                    Some(&q) => {
                        let s = intersection(q, f(q), k, f(k));
                        if s <= *bounds.last().unwrap() {
                            sites.pop();
                            bounds.pop();
                        } else {
                            sites.push(k);
                            bounds.push(s);
                            break;
                        }
                    }
                }
            }
        }
        // Any foreground column gives every row a finite vertical distance.
        debug_assert!(!sites.is_empty());
        let mut idx = 0;
        for x in 0..w {
            while idx + 1 < sites.len() && bounds[idx + 1] < x as f64 {
                idx += 1;
            }
            let k = sites[idx];
            let dx = x as i64 - k as i64;
            out[r * w + x] = (dx * dx + f(k)) as u64;
        }
    }
    Some(out)
}

fn intersection(q: usize, fq: i64, k: usize, fk: i64) -> f64 {
    let (q, k) = (q as i64, k as i64);
    ((fk + k * k) - (fq + q * q)) as f64 / (2 * (k - q)) as f64
}

/// Distance from each pixel centre to the nearest foreground pixel centre.
///
/// Values are in mm for calibrated masks and pixels otherwise. An empty mask
/// yields `+inf` everywhere.
pub fn edt(mask: &BinaryMask) -> DistanceField {
    let (h, w) = mask.dims();
    let scale = mask.spacing().unwrap_or(1.0);
    let values = match squared_edt_px(mask) {
        Some(d2) => d2.into_iter().map(|d| (d as f64).sqrt() * scale).collect(),
        None => vec![f64::INFINITY; h * w],
    };
    DistanceField {
        height: h,
        width: w,
        values,
        spacing: mask.spacing(),
    }
}
