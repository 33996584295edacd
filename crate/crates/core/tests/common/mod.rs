//! Independent reference implementations used as test oracles.
//!
//! Everything here is deliberately naive (quadratic scans, explicit sets) and
//! shares no code path with the library beyond the mask container.

#![allow(dead_code)]

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use slabseg::raster::BinaryMask;

pub mod scenarios;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Mix of random rectangles, disks and salt noise.
pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, spacing: f64) -> BinaryMask {
    let mut m = BinaryMask::empty(h, w, Some(spacing));
    let shapes = rng.random_range(0..5);
    for _ in 0..shapes {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let ry = rng.random_range(1.0..h as f64 / 3.0);
        let rx = rng.random_range(1.0..w as f64 / 3.0);
        let disk = rng.random_bool(0.5);
        for r in 0..h {
            for c in 0..w {
                let dy = (r as f64 - cy) / ry;
                let dx = (c as f64 - cx) / rx;
                let inside = if disk {
                    dy * dy + dx * dx <= 1.0
                } else {
                    dy.abs() <= 1.0 && dx.abs() <= 1.0
                };
                if inside {
                    m.set(r, c, true);
                }
            }
        }
    }
    let salt = rng.random_range(0.0..0.05);
    for r in 0..h {
        for c in 0..w {
            if rng.random_bool(salt) {
                let v = m.get(r, c);
                m.set(r, c, !v);
            }
        }
    }
    m
}

pub fn pixels(m: &BinaryMask) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for r in 0..m.height() {
        for c in 0..m.width() {
            if m.get(r, c) {
                out.push((r, c));
            }
        }
    }
    out
}

pub fn brute_edt(m: &BinaryMask) -> Vec<f64> {
    let s = m.spacing().unwrap_or(1.0);
    let fg = pixels(m);
    let mut out = Vec::with_capacity(m.height() * m.width());
    for r in 0..m.height() {
        for c in 0..m.width() {
            let best = fg
                .iter()
                .map(|&(i, j)| {
                    let dy = r as f64 - i as f64;
                    let dx = c as f64 - j as f64;
                    dy * dy + dx * dx
                })
                .fold(f64::INFINITY, f64::min);
            out.push(best.sqrt() * s);
        }
    }
    out
}

pub fn brute_boundary(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let (h, w) = m.dims();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && r < h as i64 && c < w as i64 && m.get(r as usize, c as usize);
    pixels(m)
        .into_iter()
        .filter(|&(r, c)| {
            let (r, c) = (r as i64, c as i64);
            [(-1, 0), (1, 0), (0, -1), (0, 1)]
                .iter()
                .any(|(dr, dc)| !inside(r + dr, c + dc))
        })
        .collect()
}

/// Union-find labelling; returns a label per pixel (0 = background).
pub fn union_find_labels(m: &BinaryMask, eight: bool) -> Vec<usize> {
    let (h, w) = m.dims();
    let mut parent: Vec<usize> = (0..h * w).collect();
    fn find(p: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while p[root] != root {
            root = p[root];
        }
        let mut cur = x;
        while p[cur] != root {
            let next = p[cur];
            p[cur] = root;
            cur = next;
        }
        root
    }
    for r in 0..h {
        for c in 0..w {
            if !m.get(r, c) {
                continue;
            }
            let mut nbrs = vec![(r as i64 - 1, c as i64), (r as i64, c as i64 - 1)];
            if eight {
                nbrs.push((r as i64 - 1, c as i64 - 1));
                nbrs.push((r as i64 - 1, c as i64 + 1));
            }
            for (nr, nc) in nbrs {
                if nr < 0 || nc < 0 || nc >= w as i64 {
                    continue;
                }
                let (nr, nc) = (nr as usize, nc as usize);
                if m.get(nr, nc) {
                    let a = find(&mut parent, r * w + c);
                    let b = find(&mut parent, nr * w + nc);
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    (0..h * w)
        .map(|i| if m.bits()[i] { find(&mut parent, i) + 1 } else { 0 })
        .collect()
}

pub fn brute_dilate(m: &BinaryMask, radius_mm: f64) -> Vec<bool> {
    let s = m.spacing().unwrap();
    brute_edt(m).into_iter().map(|d| d <= radius_mm + 1e-9 * s).collect()
}

/// Fill by depth-first search from every border background pixel.
pub fn brute_fill(m: &BinaryMask) -> Vec<bool> {
    let (h, w) = m.dims();
    let mut reached = vec![false; h * w];
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !m.get(r, c) {
                stack.push((r, c));
            }
        }
    }
    while let Some((r, c)) = stack.pop() {
        if reached[r * w + c] || m.get(r, c) {
            continue;
        }
        reached[r * w + c] = true;
        if r > 0 {
            stack.push((r - 1, c));
        }
        if r + 1 < h {
            stack.push((r + 1, c));
        }
        if c > 0 {
            stack.push((r, c - 1));
        }
        if c + 1 < w {
            stack.push((r, c + 1));
        }
    }
    reached.into_iter().map(|x| !x).collect()
}

/// Percentile by the "(n-1)p" rank rule, written with explicit index math.
pub fn oracle_percentile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 1 {
        return v[0];
    }
    let h = (n as f64 - 1.0) * p / 100.0;
    let k = h as usize;
    if k + 1 >= n {
        return v[n - 1];
    }
    v[k] + (h - k as f64) * (v[k + 1] - v[k])
}

pub struct OracleMetrics {
    pub dice: f64,
    pub assd: Option<f64>,
    pub hd95: Option<f64>,
    pub max: Option<f64>,
}

/// Set arithmetic plus all-pairs boundary distances.
pub fn oracle_metrics(pred: &BinaryMask, reference: &BinaryMask, region: &BinaryMask) -> OracleMetrics {
    let s = reference.spacing().or(pred.spacing()).unwrap();
    let region_set: HashSet<(usize, usize)> = pixels(region).into_iter().collect();
    let p: HashSet<_> = pixels(pred).into_iter().filter(|x| region_set.contains(x)).collect();
    let r: HashSet<_> = pixels(reference)
        .into_iter()
        .filter(|x| region_set.contains(x))
        .collect();
    let inter = p.intersection(&r).count();
    let dice = if p.is_empty() && r.is_empty() {
        1.0
    } else {
        2.0 * inter as f64 / (p.len() + r.len()) as f64
    };

    let to_mask = |set: &HashSet<(usize, usize)>| {
        BinaryMask::from_fn(pred.height(), pred.width(), Some(s), |a, b| set.contains(&(a, b)))
    };
    let bp = brute_boundary(&to_mask(&p));
    let br = brute_boundary(&to_mask(&r));
    if bp.is_empty() || br.is_empty() {
        return OracleMetrics {
            dice,
            assd: None,
            hd95: None,
            max: None,
        };
    }
    let directed = |from: &HashSet<(usize, usize)>, to: &HashSet<(usize, usize)>| -> Vec<f64> {
        let mut out: Vec<f64> = from
            .iter()
            .map(|&(a, b)| {
                to.iter()
                    .map(|&(c, d)| {
                        let dy = a as f64 - c as f64;
                        let dx = b as f64 - d as f64;
                        (dy * dy + dx * dx).sqrt() * s
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        // Deterministic summation order.
        out.sort_by(|x, y| x.partial_cmp(y).unwrap());
        out
    };
    let d1 = directed(&bp, &br);
    let d2 = directed(&br, &bp);
    let pooled: Vec<f64> = d1.iter().chain(&d2).copied().collect();
    let assd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    OracleMetrics {
        dice,
        assd: Some(assd),
        hd95: Some(oracle_percentile(&pooled, 95.0)),
        max: Some(pooled.iter().copied().fold(0.0, f64::max)),
    }
}

/// Compares optional metrics within `tol`.
pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (None, None) => true,
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        _ => false,
    }
}
