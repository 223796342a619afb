//! Ego-motion compensation.
//!
//! Wearer head motion is modeled as a frame-to-frame homography fitted to
//! a grid of correspondences read off the dense flow. The flow induced by
//! that homography is subtracted, leaving the motion of hands and objects.

use nalgebra::{DMatrix, Matrix3, Point2, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FitError, Result};
use crate::flow::FlowField;

pub type Point = Point2<f64>;

/// Smallest homogeneous depth treated as finite.
const MIN_DEPTH: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography {
    h: Matrix3<f64>,
}

impl Homography {
    pub fn identity() -> Self {
        Self {
            h: Matrix3::identity(),
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self {
            h: Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0),
        }
    }

    /// Wrap a matrix, scaling it so `h[2][2] == 1` when that entry is not
    /// vanishing.
    pub fn from_matrix(h: Matrix3<f64>) -> Self {
        let s = h[(2, 2)];
        if s.abs() > f64::EPSILON {
            Self { h: h / s }
        } else {
            Self { h }
        }
    }

    pub fn from_rows(rows: [[f64; 3]; 3]) -> Self {
        Self::from_matrix(Matrix3::from_fn(|r, c| rows[r][c]))
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.h
    }

    pub fn to_rows(&self) -> [[f64; 3]; 3] {
        let mut rows = [[0.0; 3]; 3];
        for (r, row) in rows.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = self.h[(r, c)];
            }
        }
        rows
    }

    pub fn inverse(&self) -> Option<Homography> {
        self.h.try_inverse().map(Homography::from_matrix)
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Homography) -> Homography {
        Homography::from_matrix(self.h * other.h)
    }

    /// Ratio of extreme singular values.
    pub fn condition_number(&self) -> f64 {
        let sv = self.h.singular_values();
        let (max, min) = sv.iter().fold((0.0f64, f64::INFINITY), |(a, b), &s| (a.max(s), b.min(s)));
        if min == 0.0 {
            f64::INFINITY
        } else {
            max / min
        }
    }

    pub fn max_abs_diff(&self, other: &Homography) -> f64 {
        (self.h - other.h).abs().max()
    }

    pub fn apply(&self, p: &Point) -> Result<Point> {
        let q = self.h * Vector3::new(p.x, p.y, 1.0);
        if q.z.abs() <= MIN_DEPTH {
            return Err(Error::PointAtInfinity(q.z));
        }
        Ok(Point::new(q.x / q.z, q.y / q.z))
    }
}

pub fn apply_homography(h: &Homography, p: &Point) -> Result<Point> {
    h.apply(p)
}

/// Displacement field `H(p) − p` over a `width x height` pixel grid.
pub fn induced_flow(h: &Homography, width: usize, height: usize) -> Result<FlowField> {
    let mut u = Vec::with_capacity(width * height);
    let mut v = Vec::with_capacity(width * height);
    for y in 0..height {
        for x in 0..width {
            let p = Point::new(x as f64, y as f64);
            let q = h.apply(&p)?;
            u.push(q.x - p.x);
            v.push(q.y - p.y);
        }
    }
    FlowField::new(width, height, u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacParams {
    pub iterations: usize,
    /// Symmetric transfer error bound, pixels.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self {
            iterations: 500,
            inlier_threshold: 1.0,
            min_inlier_fraction: 0.4,
            seed: 0,
        }
    }
}

/// Grid correspondences `(p, p + flow(p))` at interior points with stride
/// `grid_step`: `x, y ∈ {step, 2·step, ...}` strictly inside the border.
pub fn sample_correspondences(flow: &FlowField, grid_step: usize) -> Vec<(Point, Point)> {
    let step = grid_step.max(1);
    let mut pairs = Vec::new();
    let interior = |k: usize, n: usize| k + 1 < n;
    let mut y = step;
    while interior(y, flow.height()) {
        let mut x = step;
        while interior(x, flow.width()) {
            let (u, v) = flow.get(x, y);
            let p = Point::new(x as f64, y as f64);
            pairs.push((p, Point::new(p.x + u, p.y + v)));
            x += step;
        }
        y += step;
    }
    pairs
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn normalizing_transform(points: &[Point]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let (cx, cy) = points
        .iter()
        .fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = points
        .iter()
        .map(|p| ((p.x - cx).powi(2) + (p.y - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist <= f64::EPSILON * (1.0 + cx.abs() + cy.abs()) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    Some(Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0))
}

fn transform(t: &Matrix3<f64>, p: &Point) -> Point {
    let q = t * Vector3::new(p.x, p.y, 1.0);
    Point::new(q.x / q.z, q.y / q.z)
}

/// Normalized DLT over all given correspondences (least squares in the
/// algebraic sense, via SVD).
pub fn dlt_homography(src: &[Point], dst: &[Point]) -> Result<Homography> {
    let n = src.len();
    if n < 4 || dst.len() != n {
        return Err(FitError::TooFewPairs(n.min(dst.len())).into());
    }
    if all_collinear(src) || all_collinear(dst) {
        return Err(FitError::Degenerate.into());
    }
    let ts = normalizing_transform(src).ok_or(FitError::Degenerate)?;
    let td = normalizing_transform(dst).ok_or(FitError::Degenerate)?;
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, (p, q)) in src.iter().zip(dst).enumerate() {
        let p = transform(&ts, p);
        let q = transform(&td, q);
        let (x, y, u, v) = (p.x, p.y, q.x, q.y);
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
    // Null vector of A: right singular vector of the smallest singular value.
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(FitError::Degenerate)?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
    let hv = v_t.row(imin);
    let hn = Matrix3::from_fn(|r, c| hv[3 * r + c]);
    let td_inv = td.try_inverse().ok_or(FitError::Degenerate)?;
    let h = td_inv * hn * ts;
    if h[(2, 2)].abs() <= MIN_DEPTH || h.iter().any(|x| !x.is_finite()) {
        return Err(FitError::Degenerate.into());
    }
    Ok(Homography::from_matrix(h))
}

fn collinear(a: &Point, b: &Point, c: &Point, scale: f64) -> bool {
    let area = (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x);
    area.abs() <= 1e-9 * scale * scale
}

fn spread(points: &[Point]) -> f64 {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        lo = lo.min(p.x).min(p.y);
        hi = hi.max(p.x).max(p.y);
    }
    (hi - lo).max(f64::MIN_POSITIVE)
}

fn all_collinear(points: &[Point]) -> bool {
    let scale = spread(points);
    let a = points[0];
    let Some(b) = points.iter().find(|p| (p.x - a.x).hypot(p.y - a.y) > 1e-9 * scale) else {
        return true;
    };
    points.iter().all(|c| collinear(&a, b, c, scale))
}

fn sample_degenerate(points: &[Point]) -> bool {
    let scale = spread(points);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            for k in j + 1..points.len() {
                if collinear(&points[i], &points[j], &points[k], scale) {
                    return true;
                }
            }
        }
    }
    false
}

/// Symmetric transfer error `sqrt(|H p − q|² + |H⁻¹ q − p|²)`.
fn transfer_error(h: &Homography, h_inv: &Homography, p: &Point, q: &Point) -> f64 {
    match (h.apply(p), h_inv.apply(q)) {
        (Ok(hp), Ok(hq)) => ((hp - q).norm_squared() + (hq - p).norm_squared()).sqrt(),
        _ => f64::INFINITY,
    }
}

fn score(h: &Homography, pairs: &[(Point, Point)], threshold: f64) -> Option<(Vec<bool>, usize, f64)> {
    let h_inv = h.inverse()?;
    let mut mask = Vec::with_capacity(pairs.len());
    let (mut count, mut err) = (0, 0.0);
    for (p, q) in pairs {
        let e = transfer_error(h, &h_inv, p, q);
        let inlier = e < threshold;
        if inlier {
            count += 1;
            err += e;
        }
        mask.push(inlier);
    }
    Some((mask, count, err))
}

/// Robust homography fit: RANSAC over 4-point minimal samples, scoring by
/// symmetric transfer error, followed by a least-squares refit on the
/// consensus set. Deterministic for a fixed `params.seed`.
pub fn fit_homography(pairs: &[(Point, Point)], params: &RansacParams) -> Result<(Homography, Vec<bool>)> {
    if pairs.len() < 4 {
        return Err(FitError::TooFewPairs(pairs.len()).into());
    }
    if params.iterations == 0 || !(params.inlier_threshold > 0.0) {
        return Err(Error::InvalidArgument(format!("invalid RANSAC parameters {params:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let n = pairs.len();
    let mut best: Option<(Homography, usize, f64)> = None;
    let mut needed = params.iterations;
    let mut iter = 0;
    while iter < needed.min(params.iterations) {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let src: Vec<Point> = idx.iter().map(|i| pairs[i].0).collect();
        let dst: Vec<Point> = idx.iter().map(|i| pairs[i].1).collect();
        if sample_degenerate(&src) || sample_degenerate(&dst) {
            continue;
        }
        let Ok(h) = dlt_homography(&src, &dst) else {
            continue;
        };
        let Some((_, count, err)) = score(&h, pairs, params.inlier_threshold) else {
            continue;
        };
        let better = match &best {
            None => true,
            Some((_, c, e)) => count > *c || (count == *c && err < *e),
        };
        if better {
            best = Some((h, count, err));
            // Adaptive stop for 99% confidence of an all-inlier sample.
            let w = count as f64 / n as f64;
            let p_good = w.powi(4);
            needed = if p_good >= 1.0 - 1e-12 {
                iter
            } else if p_good <= 0.0 {
                params.iterations
            } else {
                ((0.01f64).ln() / (1.0 - p_good).ln()).ceil().max(1.0) as usize
            };
        }
    }
    let Some((mut h, _, _)) = best else {
        return Err(FitError::Degenerate.into());
    };
    let (mut mask, _, _) = score(&h, pairs, params.inlier_threshold).ok_or(FitError::Degenerate)?;
    // Refit on the consensus set; repeat while the set keeps changing.
    for _ in 0..5 {
        let src: Vec<Point> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p.0).collect();
        let dst: Vec<Point> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p.1).collect();
        if src.len() < 4 {
            return Err(FitError::Degenerate.into());
        }
        let refit = dlt_homography(&src, &dst)?;
        let (new_mask, _, _) = score(&refit, pairs, params.inlier_threshold).ok_or(FitError::Degenerate)?;
        h = refit;
        if new_mask == mask {
            break;
        }
        mask = new_mask;
    }
    let inliers = mask.iter().filter(|&&m| m).count();
    let fraction = inliers as f64 / n as f64;
    if fraction < params.min_inlier_fraction {
        return Err(FitError::LowInlierFraction {
            fraction,
            min: params.min_inlier_fraction,
        }
        .into());
    }
    Ok((h, mask))
}

/// `out(p) = flow(p) − (H(p) − p)` at every pixel.
pub fn compensate_flow(flow: &FlowField, h: &Homography) -> Result<FlowField> {
    let (w, hgt) = (flow.width(), flow.height());
    let mut u = Vec::with_capacity(w * hgt);
    let mut v = Vec::with_capacity(w * hgt);
    for y in 0..hgt {
        for x in 0..w {
            let p = Point::new(x as f64, y as f64);
            let q = h.apply(&p)?;
            let (fu, fv) = flow.get(x, y);
            u.push(fu - (q.x - p.x));
            v.push(fv - (q.y - p.y));
        }
    }
    FlowField::new(w, hgt, u, v)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompensationParams {
    pub grid_step: usize,
    pub ransac: RansacParams,
}

impl Default for CompensationParams {
    fn default() -> Self {
        Self {
            grid_step: 8,
            ransac: RansacParams::default(),
        }
    }
}

/// Per-frame outcome of [`compensate_sequence`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub frame: usize,
    pub inlier_fraction: f64,
    pub fallback: bool,
    pub warning: Option<String>,
    pub homography: [[f64; 3]; 3],
}

/// Fit and cancel a homography per frame. Frames whose fit fails fall back
/// to the identity (no compensation) and carry a warning. Frame `i` uses
/// RANSAC seed `seed + i`, so results do not depend on scheduling.
pub fn compensate_sequence(flows: &[FlowField], params: &CompensationParams) -> (Vec<FlowField>, Vec<FitReport>) {
    flows
        .par_iter()
        .enumerate()
        .map(|(i, flow)| compensate_frame(i, flow, params))
        .unzip()
}

fn compensate_frame(i: usize, flow: &FlowField, params: &CompensationParams) -> (FlowField, FitReport) {
    let ransac = RansacParams {
        seed: params.ransac.seed.wrapping_add(i as u64),
        ..params.ransac
    };
    let pairs = sample_correspondences(flow, params.grid_step);
    let fitted = fit_homography(&pairs, &ransac).and_then(|(h, mask)| {
        let out = compensate_flow(flow, &h)?;
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        Ok((out, h, frac))
    });
    match fitted {
        Ok((out, h, frac)) => (
            out,
            FitReport {
                frame: i,
                inlier_fraction: frac,
                fallback: false,
                warning: None,
                homography: h.to_rows(),
            },
        ),
        Err(e) => {
            log::warn!("frame {i}: homography fit failed ({e}); using identity");
            (
                flow.clone(),
                FitReport {
                    frame: i,
                    inlier_fraction: 0.0,
                    fallback: true,
                    warning: Some(e.to_string()),
                    homography: Homography::identity().to_rows(),
                },
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_counts_interior_points() {
        let f = FlowField::zeros(32, 32);
        let pairs = sample_correspondences(&f, 8);
        assert_eq!(pairs.len(), 9);
        assert!(pairs.iter().all(|(p, q)| p == q));
    }

    #[test]
    fn identity_and_translation_application() {
        let p = Point::new(3.5, -2.0);
        assert_eq!(Homography::identity().apply(&p).unwrap(), p);
        let q = Homography::translation(1.0, 2.0).apply(&p).unwrap();
        assert_eq!(q, Point::new(4.5, 0.0));
    }

    #[test]
    fn inverse_composition_returns_point() {
        let h = Homography::from_rows([[1.02, 0.03, 4.0], [-0.01, 0.98, -2.0], [1e-4, -2e-4, 1.0]]);
        let p = Point::new(12.0, 40.0);
        let back = h.inverse().unwrap().apply(&h.apply(&p).unwrap()).unwrap();
        assert!((back - p).norm() < 1e-9);
    }

    #[test]
    fn point_at_infinity_is_an_error() {
        let h = Homography::from_rows([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 0.0, 0.0]]);
        assert!(matches!(h.apply(&Point::new(0.0, 5.0)), Err(Error::PointAtInfinity(_))));
    }

    #[test]
    fn identity_pairs_give_identity() {
        let pairs: Vec<_> = (0..30)
            .map(|i| {
                let p = Point::new((i * 7 % 50) as f64, (i * 13 % 40) as f64);
                (p, p)
            })
            .collect();
        let (h, mask) = fit_homography(&pairs, &RansacParams::default()).unwrap();
        assert!(h.max_abs_diff(&Homography::identity()) < 1e-9);
        assert!(mask.iter().all(|&m| m));
    }

    #[test]
    fn too_few_pairs_and_collinear() {
        let p = Point::new(0.0, 0.0);
        assert!(matches!(
            fit_homography(&[(p, p); 3], &RansacParams::default()),
            Err(Error::Fit(FitError::TooFewPairs(3)))
        ));
        let line: Vec<_> = (0..10).map(|i| (Point::new(i as f64, 0.0), Point::new(i as f64, 0.0))).collect();
        assert!(fit_homography(&line, &RansacParams::default()).is_err());
    }

    #[test]
    fn compensating_with_identity_is_exact() {
        let f = FlowField::from_fn(9, 7, |x, y| (x as f64 * 0.1, -(y as f64) * 0.3));
        assert_eq!(compensate_flow(&f, &Homography::identity()).unwrap(), f);
    }

    #[test]
    fn zero_sequence_stays_zero() {
        let flows = vec![FlowField::zeros(40, 40); 3];
        let (out, reports) = compensate_sequence(&flows, &CompensationParams::default());
        assert!(out.iter().all(|f| f.max_magnitude() < 1e-9));
        assert!(reports.iter().all(|r| !r.fallback && r.inlier_fraction == 1.0));
    }

    #[test]
    fn failed_fit_falls_back_to_identity() {
        // A field too small for any grid correspondences.
        let flows = vec![FlowField::from_fn(4, 4, |_, _| (1.0, 0.0))];
        let (out, reports) = compensate_sequence(&flows, &CompensationParams::default());
        assert_eq!(out[0], flows[0]);
        assert!(reports[0].fallback);
        assert!(reports[0].warning.is_some());
    }
}
