//! Planar projective transforms and their estimation.
//!
//! [`estimate_homography_dlt`] is the Hartley-normalized direct linear
//! transform; [`ransac_homography`] wraps it in a seeded consensus loop scored
//! by symmetric transfer error.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{GeometryError, PointCorrespondence};

const MIN_DET: f64 = 1e-12;

/// 3x3 projective transform, scaled so `h[2][2] = 1` (or unit Frobenius norm
/// when that entry vanishes).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct Homography {
    m: [[f64; 3]; 3],
}

impl TryFrom<[[f64; 3]; 3]> for Homography {
    type Error = GeometryError;

    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        Homography::from_rows(rows)
    }
}

impl From<Homography> for [[f64; 3]; 3] {
    fn from(h: Homography) -> Self {
        h.m
    }
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Isotropic scaling about the origin.
    pub fn scale(s: f64) -> Self {
        Self {
            m: [[s, 0.0, 0.0], [0.0, s, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            m: [[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]],
        }
    }

    /// Normalizes and validates a matrix.
    pub fn from_rows(rows: [[f64; 3]; 3]) -> Result<Self, GeometryError> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(GeometryError::NonInvertible(f64::NAN));
        }
        let h = Self::from_rows_unchecked(rows).normalized();
        let det = h.det();
        if !(det.abs() > MIN_DET) {
            return Err(GeometryError::NonInvertible(det));
        }
        Ok(h)
    }

    /// Stores the matrix as given, without normalization or invertibility checks.
    pub fn from_rows_unchecked(rows: [[f64; 3]; 3]) -> Self {
        Self { m: rows }
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.m
    }

    fn to_na(self) -> Matrix3<f64> {
        Matrix3::from_fn(|r, c| self.m[r][c])
    }

    fn from_na(m: &Matrix3<f64>) -> Self {
        Self {
            m: std::array::from_fn(|r| std::array::from_fn(|c| m[(r, c)])),
        }
    }

    fn normalized(self) -> Self {
        let h22 = self.m[2][2];
        let frob = self.m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
        let scale = if h22.abs() > 1e-12 * frob.max(f64::MIN_POSITIVE) {
            h22
        } else {
            frob
        };
        if scale == 0.0 {
            return self;
        }
        Self {
            m: self.m.map(|row| row.map(|v| v / scale)),
        }
    }

    pub fn det(&self) -> f64 {
        self.to_na().determinant()
    }

    pub fn inverse(&self) -> Result<Homography, GeometryError> {
        let det = self.det();
        if !(det.abs() > MIN_DET) {
            return Err(GeometryError::NonInvertible(det));
        }
        let inv = self.to_na().try_inverse().ok_or(GeometryError::NonInvertible(det))?;
        Ok(Self::from_na(&inv).normalized())
    }

    /// Composition `self ∘ other` (apply `other` first).
    pub fn compose(&self, other: &Homography) -> Homography {
        Self::from_na(&(self.to_na() * other.to_na())).normalized()
    }

    /// Maps a point; `None` when it lands on the line at infinity.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.m;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-15 {
            return None;
        }
        let u = (m[0][0] * x + m[0][1] * y + m[0][2]) / w;
        let v = (m[1][0] * x + m[1][1] * y + m[1][2]) / w;
        (u.is_finite() && v.is_finite()).then_some((u, v))
    }

    /// Relative Frobenius distance after both are brought to the same scale.
    pub fn relative_frobenius_error(&self, truth: &Homography) -> f64 {
        let a = self.to_na();
        let b = truth.to_na();
        let an = a / a.norm();
        let bn = b / b.norm();
        // Resolve the overall sign ambiguity of projective matrices.
        let d = if an.dot(&bn) < 0.0 { an + bn } else { an - bn };
        d.norm()
    }

    /// Symmetric transfer error of one correspondence: the RMS of the forward
    /// (`|H s - d|`) and backward (`|H^-1 d - s|`) transfer distances.
    pub fn symmetric_transfer_error(&self, inverse: &Homography, src: (f64, f64), dst: (f64, f64)) -> f64 {
        let fwd = match self.apply(src.0, src.1) {
            Some(p) => dist(p, dst),
            None => f64::INFINITY,
        };
        let bwd = match inverse.apply(dst.0, dst.1) {
            Some(p) => dist(p, src),
            None => f64::INFINITY,
        };
        ((fwd * fwd + bwd * bwd) / 2.0).sqrt()
    }
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Similarity that moves the centroid to the origin and the mean distance to √2.
fn normalizing_transform(points: &[(f64, f64)]) -> Result<Matrix3<f64>, GeometryError> {
    let n = points.len() as f64;
    let cx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = points.iter().map(|p| p.1).sum::<f64>() / n;
    let mean_dist = points.iter().map(|p| dist(*p, (cx, cy))).sum::<f64>() / n;
    if !(mean_dist > 1e-12) || !mean_dist.is_finite() {
        return Err(GeometryError::DegenerateConfiguration("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Ok(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn apply_na(t: &Matrix3<f64>, p: (f64, f64)) -> (f64, f64) {
    let v = t * Vector3::new(p.0, p.1, 1.0);
    (v[0] / v[2], v[1] / v[2])
}

/// Normalized DLT over at least four correspondences, mapping `src` to `dst`.
pub fn estimate_homography_dlt(corrs: &[PointCorrespondence]) -> Result<Homography, GeometryError> {
    let src: Vec<_> = corrs.iter().map(|c| c.src).collect();
    let dst: Vec<_> = corrs.iter().map(|c| c.dst).collect();
    dlt_points(&src, &dst)
}

pub(crate) fn dlt_points(src: &[(f64, f64)], dst: &[(f64, f64)]) -> Result<Homography, GeometryError> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(GeometryError::TooFewCorrespondences(n));
    }
    if src.iter().chain(dst).any(|p| !(p.0.is_finite() && p.1.is_finite())) {
        return Err(GeometryError::DegenerateConfiguration("non-finite coordinate".into()));
    }
    let ts = normalizing_transform(src)?;
    let td = normalizing_transform(dst)?;

    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for i in 0..n {
        let (x, y) = apply_na(&ts, src[i]);
        let (u, v) = apply_na(&td, dst[i]);
        let r0 = 2 * i;
        let r1 = r0 + 1;
        a[(r0, 0)] = -x;
        a[(r0, 1)] = -y;
        a[(r0, 2)] = -1.0;
        a[(r0, 6)] = u * x;
        a[(r0, 7)] = u * y;
        a[(r0, 8)] = u;
        a[(r1, 3)] = -x;
        a[(r1, 4)] = -y;
        a[(r1, 5)] = -1.0;
        a[(r1, 6)] = v * x;
        a[(r1, 7)] = v * y;
        a[(r1, 8)] = v;
    }

    let svd = a.svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| GeometryError::DegenerateConfiguration("SVD did not converge".into()))?;
    let mut order: Vec<usize> = (0..9).collect();
    order.sort_by(|&i, &j| svd.singular_values[j].total_cmp(&svd.singular_values[i]));
    let largest = svd.singular_values[order[0]];
    let second_smallest = svd.singular_values[order[7]];
    // A one-dimensional null space is required; a second vanishing singular
    // value means collinear or repeated points.
    if !(second_smallest > 1e-9 * largest) {
        return Err(GeometryError::DegenerateConfiguration(
            "design matrix is rank deficient".into(),
        ));
    }
    let h = v_t.row(order[8]);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let td_inv = td
        .try_inverse()
        .ok_or_else(|| GeometryError::DegenerateConfiguration("normalization not invertible".into()))?;
    let full = td_inv * hn * ts;
    let out = Homography::from_na(&full).normalized();
    let det = out.det();
    if !(det.abs() > MIN_DET) {
        return Err(GeometryError::DegenerateConfiguration(format!(
            "estimated |det| = {det:e}"
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RansacParams {
    /// Inlier threshold on symmetric transfer error.
    pub threshold: f64,
    pub iterations: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            iterations: 500,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    pub homography: Homography,
    /// Indices into the input correspondences, ascending.
    pub inliers: Vec<usize>,
    /// Mean symmetric transfer error over the inliers.
    pub mean_transfer_error: f64,
}

fn score(h: &Homography, corrs: &[PointCorrespondence], threshold: f64) -> Option<(Vec<usize>, f64)> {
    let inv = h.inverse().ok()?;
    let mut inliers = Vec::new();
    let mut total = 0.0;
    for (i, c) in corrs.iter().enumerate() {
        let e = h.symmetric_transfer_error(&inv, c.src, c.dst);
        if e <= threshold {
            inliers.push(i);
            total += e;
        }
    }
    Some((inliers, total))
}

fn better(candidate: &(Vec<usize>, f64), best: &Option<(Vec<usize>, f64)>) -> bool {
    match best {
        None => true,
        Some((inl, err)) => candidate.0.len() > inl.len() || (candidate.0.len() == inl.len() && candidate.1 < *err),
    }
}

/// Seeded RANSAC over minimal four-point samples with local optimization.
///
/// Whenever a sample beats the current best consensus, its inlier set is
/// refit by DLT while the threshold shrinks from 3x to 1x, so a model that
/// minimal samples only nearly reach can still collect its full support. The
/// final model is the DLT refit on the winning consensus, repeated while that
/// changes the inlier set.
pub fn ransac_homography(corrs: &[PointCorrespondence], params: &RansacParams) -> Result<RansacResult, GeometryError> {
    if corrs.len() < 4 {
        return Err(GeometryError::NoConsensus(corrs.len()));
    }
    if !(params.threshold > 0.0) || params.iterations == 0 {
        return Err(GeometryError::InvalidParameter(format!(
            "threshold {} / iterations {}",
            params.threshold, params.iterations
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut best_model = None;
    for _ in 0..params.iterations {
        let sample = index::sample(&mut rng, corrs.len(), 4);
        let subset: Vec<PointCorrespondence> = sample.iter().map(|i| corrs[i]).collect();
        let Ok(h) = estimate_homography_dlt(&subset) else {
            continue;
        };
        let Some(s) = score(&h, corrs, params.threshold) else {
            continue;
        };
        if !better(&s, &best) {
            continue;
        }
        let (h, s) = local_optimize(corrs, h, s, params.threshold);
        if better(&s, &best) {
            best = Some(s);
            best_model = Some(h);
        }
    }
    let (Some((mut inliers, _)), Some(mut model)) = (best, best_model) else {
        return Err(GeometryError::NoConsensus(0));
    };
    if inliers.len() < 4 {
        return Err(GeometryError::NoConsensus(inliers.len()));
    }

    for _ in 0..10 {
        let next_model = refit(corrs, &inliers)?;
        let (next, _) = score(&next_model, corrs, params.threshold)
            .ok_or_else(|| GeometryError::DegenerateConfiguration("refit not invertible".into()))?;
        if next.len() < 4 {
            break;
        }
        model = next_model;
        if next == inliers {
            break;
        }
        inliers = next;
    }
    let inv = model.inverse()?;
    let mean_transfer_error = inliers
        .iter()
        .map(|&i| model.symmetric_transfer_error(&inv, corrs[i].src, corrs[i].dst))
        .sum::<f64>()
        / inliers.len() as f64;
    Ok(RansacResult {
        homography: model,
        inliers,
        mean_transfer_error,
    })
}

/// Iterated refit with a shrinking threshold; keeps the input if nothing improves.
fn local_optimize(
    corrs: &[PointCorrespondence],
    h: Homography,
    s: (Vec<usize>, f64),
    threshold: f64,
) -> (Homography, (Vec<usize>, f64)) {
    let mut best = (h, s);
    let mut inliers = best.1 .0.clone();
    for k in [3.0, 2.0, 1.5, 1.0] {
        if inliers.len() < 4 {
            break;
        }
        let Ok(model) = refit(corrs, &inliers) else {
            break;
        };
        let Some(wide) = score(&model, corrs, k * threshold) else {
            break;
        };
        if let Some(candidate) = score(&model, corrs, threshold) {
            if better(&candidate, &Some(best.1.clone())) {
                best = (model, candidate);
            }
        }
        inliers = wide.0;
    }
    best
}

fn refit(corrs: &[PointCorrespondence], inliers: &[usize]) -> Result<Homography, GeometryError> {
    let subset: Vec<PointCorrespondence> = inliers.iter().map(|&i| corrs[i]).collect();
    estimate_homography_dlt(&subset)
}
