//! Normalized eight-point essential matrix estimation inside RANSAC.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use super::epnp::adaptive_iterations;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EssentialParams {
    /// Sampson gate in pixels, converted to normalized units by the focal length.
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
}

impl Default for EssentialParams {
    fn default() -> Self {
        Self { threshold_px: 4.0, max_iterations: 200, confidence: 0.99 }
    }
}

/// Why the check was skipped and every match kept.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EssentialSkip {
    TooFewMatches,
    EstimationFailed,
}

impl EssentialSkip {
    pub fn as_str(&self) -> &'static str {
        match self {
            EssentialSkip::TooFewMatches => "too_few_matches",
            EssentialSkip::EstimationFailed => "estimation_failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EssentialOutcome {
    pub keep: Vec<bool>,
    pub essential: Option<Matrix3<f64>>,
    pub skipped: Option<EssentialSkip>,
}

impl EssentialOutcome {
    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley(points: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    let n = points.len() as f64;
    let (mx, my) = points.iter().fold((0.0, 0.0), |(a, b), p| (a + p.x, b + p.y));
    let (mx, my) = (mx / n, my / n);
    let mean = points.iter().map(|p| ((p.x - mx).powi(2) + (p.y - my).powi(2)).sqrt()).sum::<f64>() / n;
    if !(mean > 1e-15) {
        return None;
    }
    let s = std::f64::consts::SQRT_2 / mean;
    Some(Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0))
}

/// Linear estimate of `E` with `x2ᵀ E x1 = 0` from eight or more pairs of
/// unit-plane points, projected to rank two.
pub fn eight_point(x1: &[Vector3<f64>], x2: &[Vector3<f64>]) -> Option<Matrix3<f64>> {
    if x1.len() < 8 || x1.len() != x2.len() {
        return None;
    }
    let (t1, t2) = (hartley(x1)?, hartley(x2)?);
    let mut a = DMatrix::zeros(x1.len().max(9), 9);
    for (i, (p, q)) in x1.iter().zip(x2).enumerate() {
        let (p, q) = (t1 * p, t2 * q);
        for r in 0..3 {
            for c in 0..3 {
                a[(i, 3 * r + c)] = q[r] * p[c];
            }
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd.singular_values.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    let e = Matrix3::from_row_slice(vt.row(imin).transpose().as_slice());
    let svd = e.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut s = svd.singular_values;
    let (imin, _) = s.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1))?;
    s[imin] = 0.0;
    let e = u * Matrix3::from_diagonal(&s) * vt;
    let e = t2.transpose() * e * t1;
    let norm = e.norm();
    (norm > 0.0 && norm.is_finite()).then(|| e / norm)
}

/// First-order geometric (Sampson) error, squared, in unit-plane units.
pub fn sampson_error(e: &Matrix3<f64>, x1: &Vector3<f64>, x2: &Vector3<f64>) -> f64 {
    let ex1 = e * x1;
    let etx2 = e.transpose() * x2;
    let num = x2.dot(&ex1);
    let den = ex1.x * ex1.x + ex1.y * ex1.y + etx2.x * etx2.x + etx2.y * etx2.y;
    if den <= 0.0 {
        return if num == 0.0 { 0.0 } else { f64::INFINITY };
    }
    num * num / den
}

/// RANSAC over eight-point samples. Matches with Sampson distance below
/// `threshold_px / focal` under the best model are kept.
pub fn essential_check(
    x1: &[Vector3<f64>],
    x2: &[Vector3<f64>],
    focal: f64,
    params: &EssentialParams,
    rng: &mut ChaCha8Rng,
) -> EssentialOutcome {
    let n = x1.len();
    if n < 8 {
        return EssentialOutcome { keep: vec![true; n], essential: None, skipped: Some(EssentialSkip::TooFewMatches) };
    }
    let gate = (params.threshold_px / focal).powi(2);
    let classify = |e: &Matrix3<f64>| -> Vec<bool> { x1.iter().zip(x2).map(|(p, q)| sampson_error(e, p, q) < gate).collect() };
    let mut best: Option<(usize, Matrix3<f64>, Vec<bool>)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample(rng, n, 8);
        let s1: Vec<Vector3<f64>> = idx.iter().map(|i| x1[i]).collect();
        let s2: Vec<Vector3<f64>> = idx.iter().map(|i| x2[i]).collect();
        let Some(e) = eight_point(&s1, &s2) else { continue };
        let keep = classify(&e);
        let count = keep.iter().filter(|&&k| k).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            let miss = 1.0 - (count as f64 / n as f64).powi(8);
            needed = adaptive_iterations(miss, params.confidence, params.max_iterations, it);
            best = Some((count, e, keep));
        }
    }
    match best {
        Some((count, e, keep)) if count >= 8 => EssentialOutcome { keep, essential: Some(e), skipped: None },
        _ => EssentialOutcome { keep: vec![true; n], essential: None, skipped: Some(EssentialSkip::EstimationFailed) },
    }
}
