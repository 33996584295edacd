use std::collections::VecDeque;

use super::{squared_edt_px, BinaryMask, RasterError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)],
        }
    }
}

/// Component labels: 0 for background, `1..=count` for foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Labels {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u32>,
    pub count: u32,
}

impl Labels {
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    /// Pixel count for each label, indexed by label (index 0 is background).
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.count as usize + 1];
        for &l in &self.labels {
            sizes[l as usize] += 1;
        }
        sizes
    }

    pub fn mask_of(&self, label: u32, spacing: Option<f64>) -> BinaryMask {
        BinaryMask::new(
            self.height,
            self.width,
            self.labels.iter().map(|&l| l == label).collect(),
            spacing,
        )
        .expect("label raster has mask dimensions")
    }
}

fn neighbours(h: usize, w: usize, r: usize, c: usize, conn: Connectivity) -> impl Iterator<Item = (usize, usize)> {
    conn.offsets().iter().filter_map(move |&(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w).then_some((nr as usize, nc as usize))
    })
}

/// Labels foreground components in raster-scan order of their first pixel.
pub fn connected_components(mask: &BinaryMask, conn: Connectivity) -> Labels {
    let (h, w) = mask.dims();
    let mut labels = vec![0u32; h * w];
    let mut count = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if !mask.bits()[start] || labels[start] != 0 {
            continue;
        }
        count += 1;
        labels[start] = count;
        queue.push_back((start / w, start % w));
        while let Some((r, c)) = queue.pop_front() {
            for (nr, nc) in neighbours(h, w, r, c, conn) {
                let i = nr * w + nc;
                if mask.bits()[i] && labels[i] == 0 {
                    labels[i] = count;
                    queue.push_back((nr, nc));
                }
            }
        }
    }
    Labels {
        height: h,
        width: w,
        labels,
        count,
    }
}

/// Adds every background region (4-connected) that does not reach the border.
pub fn fill_holes(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    let mut outside = vec![false; h * w];
    let mut queue = VecDeque::new();
    let seed = |r: usize, c: usize, outside: &mut Vec<bool>, queue: &mut VecDeque<(usize, usize)>| {
        let i = r * w + c;
        if !mask.bits()[i] && !outside[i] {
            outside[i] = true;
            queue.push_back((r, c));
        }
    };
    for c in 0..w {
        seed(0, c, &mut outside, &mut queue);
        if h > 0 {
            seed(h - 1, c, &mut outside, &mut queue);
        }
    }
    for r in 0..h {
        seed(r, 0, &mut outside, &mut queue);
        if w > 0 {
            seed(r, w - 1, &mut outside, &mut queue);
        }
    }
    while let Some((r, c)) = queue.pop_front() {
        for (nr, nc) in neighbours(h, w, r, c, Connectivity::Four) {
            seed(nr, nc, &mut outside, &mut queue);
        }
    }
    BinaryMask::new(h, w, outside.into_iter().map(|o| !o).collect(), mask.spacing()).expect("same dimensions as input")
}

/// Euclidean-disk dilation: every pixel whose centre lies within `radius_mm`
/// of a foreground pixel centre.
pub fn dilate_mm(mask: &BinaryMask, radius_mm: f64) -> Result<BinaryMask, RasterError> {
    let spacing = mask.spacing().ok_or(RasterError::UncalibratedMask)?;
    if !(radius_mm >= 0.0) {
        return Err(RasterError::BadSpacing(radius_mm));
    }
    let (h, w) = mask.dims();
    let Some(d2) = squared_edt_px(mask) else {
        return Ok(mask.clone());
    };
    let r_px = radius_mm / spacing;
    // Integer squared distances; the slack absorbs rounding in radius/spacing.
    let limit = r_px * r_px * (1.0 + 1e-12);
    let bits = d2.into_iter().map(|d| (d as f64) <= limit).collect();
    BinaryMask::new(h, w, bits, mask.spacing())
}

/// Foreground pixels with at least one 4-neighbour outside the mask; the
/// image border counts as outside.
pub fn boundary(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = mask.dims();
    BinaryMask::from_fn(h, w, mask.spacing(), |r, c| {
        if !mask.get(r, c) {
            return false;
        }
        if r == 0 || c == 0 || r + 1 == h || c + 1 == w {
            return true;
        }
        !(mask.get(r - 1, c) && mask.get(r + 1, c) && mask.get(r, c - 1) && mask.get(r, c + 1))
    })
}
