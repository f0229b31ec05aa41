//! Motion-only pose refinement against fixed 3D points.

use nalgebra::{Matrix2x6, Matrix6, Vector2, Vector6};

use super::epnp::PointMatch;
use crate::descriptor::octave_scale;
use crate::geometry::{hat, PinholeCamera, Pose};
use crate::surfel_opt::huber;

/// 95% quantile of χ² with two degrees of freedom.
pub const CHI2_GATE: f64 = 5.991;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionSettings {
    /// Huber threshold on the whitened residual norm.
    pub huber_delta: f64,
    pub max_iterations: usize,
    /// Optimize / reclassify rounds.
    pub rounds: usize,
}

impl Default for MotionSettings {
    fn default() -> Self {
        Self { huber_delta: CHI2_GATE.sqrt(), max_iterations: 20, rounds: 3 }
    }
}

/// `e = p − Π(T⁻¹ x)`; `None` when the point is not in front of the camera.
pub fn reprojection_residual(pose: &Pose, m: &PointMatch, cam: &PinholeCamera) -> Option<Vector2<f64>> {
    let p = cam.project(&pose.inverse_transform_point(&m.world))?;
    Some(Vector2::new(m.pixel.u - p.u, m.pixel.v - p.v))
}

/// Residual and its Jacobian with respect to a right perturbation
/// `T·exp(δ)`, `δ = (v, ω)`.
pub fn reprojection_jacobian(pose: &Pose, m: &PointMatch, cam: &PinholeCamera) -> Option<(Vector2<f64>, Matrix2x6<f64>)> {
    let y = pose.inverse_transform_point(&m.world);
    let (p, jp) = cam.project_with_jacobian(&y)?;
    let e = Vector2::new(m.pixel.u - p.u, m.pixel.v - p.v);
    let mut jy = Matrix2x6::zeros();
    jy.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jp));
    jy.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jp * hat(&y)));
    Some((e, -jy))
}

/// Whitened squared error `e ᵀ Ω⁻¹ e` with `Ω = (1.2^octave)² I`.
pub fn chi2(pose: &Pose, m: &PointMatch, cam: &PinholeCamera) -> f64 {
    match reprojection_residual(pose, m, cam) {
        Some(e) => e.norm_squared() / octave_scale(m.octave).powi(2),
        None => f64::INFINITY,
    }
}

fn cost(pose: &Pose, matches: &[PointMatch], active: &[bool], cam: &PinholeCamera, delta: f64) -> f64 {
    matches
        .iter()
        .zip(active)
        .filter(|(_, &a)| a)
        .map(|(m, _)| {
            let c = chi2(pose, m, cam);
            if c.is_finite() { huber(c, delta).0 } else { huber(1e12, delta).0 }
        })
        .sum()
}

/// Levenberg-Marquardt over the active matches; returns `None` on a
/// non-finite cost.
fn lm(pose: &Pose, matches: &[PointMatch], active: &[bool], cam: &PinholeCamera, s: &MotionSettings) -> Option<Pose> {
    let mut pose = *pose;
    let mut current = cost(&pose, matches, active, cam, s.huber_delta);
    if !current.is_finite() {
        return None;
    }
    let mut lambda = 1e-4;
    for _ in 0..s.max_iterations {
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        for (m, _) in matches.iter().zip(active).filter(|(_, &a)| a) {
            let Some((e, j)) = reprojection_jacobian(&pose, m, cam) else { continue };
            let w = 1.0 / octave_scale(m.octave).powi(2);
            let (_, irls) = huber(w * e.norm_squared(), s.huber_delta);
            let jw = j.transpose() * (w * irls);
            h += jw * j;
            g += jw * e;
        }
        if g.norm() < 1e-12 {
            break;
        }
        let mut improved = false;
        while lambda < 1e12 {
            let mut damped = h;
            for i in 0..6 {
                damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
            }
            let Some(step) = damped.cholesky().map(|c| c.solve(&(-g))) else {
                lambda *= 10.0;
                continue;
            };
            let candidate = pose.retract(&step);
            let c = cost(&candidate, matches, active, cam, s.huber_delta);
            if c.is_finite() && c < current {
                let rel = (current - c) / current.max(1e-300);
                pose = candidate;
                current = c;
                lambda = (lambda * 0.5).max(1e-12);
                improved = rel > 1e-10;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
    }
    current.is_finite().then_some(pose)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MotionOutcome {
    pub pose: Pose,
    /// Matches passing the χ² gate at `pose`.
    pub inliers: Vec<bool>,
}

impl MotionOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Alternates robust optimization with χ² outlier classification; the
/// reported inliers are those passing the gate at the returned pose.
pub fn motion_only(rough: &Pose, matches: &[PointMatch], cam: &PinholeCamera, s: &MotionSettings) -> Option<MotionOutcome> {
    let mut pose = *rough;
    let mut active = vec![true; matches.len()];
    for round in 0..s.rounds.max(1) {
        if active.iter().filter(|&&a| a).count() < 3 {
            break;
        }
        pose = lm(&pose, matches, &active, cam, s)?;
        let next: Vec<bool> = matches.iter().map(|m| chi2(&pose, m, cam) <= CHI2_GATE).collect();
        if next == active && round > 0 {
            break;
        }
        active = next;
    }
    let inliers = matches.iter().map(|m| chi2(&pose, m, cam) <= CHI2_GATE).collect();
    pose.is_finite().then_some(MotionOutcome { pose, inliers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_rotation, Pixel, Tangent, Vec3};
    use crate::simulator::sub_rng;
    use rand::Rng;
    use rand_distr::{Distribution, Normal};

    fn cam() -> PinholeCamera {
        PinholeCamera::new(400.0, 400.0, 376.0, 240.0, 752, 480).unwrap()
    }

    fn setup(rng: &mut rand_chacha::ChaCha8Rng, n: usize, sigma: f64) -> (Pose, Vec<PointMatch>) {
        let truth = Pose::from_rotation_matrix(
            &look_rotation(&Vec3::new(rng.random_range(-1.0..1.0), 1.0, rng.random_range(-0.2..0.2)), &Vec3::z()).unwrap(),
            Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.5),
        );
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let matches = (0..n)
            .map(|_| {
                let px = Pixel::new(rng.random_range(10.0..740.0), rng.random_range(10.0..470.0));
                let z = rng.random_range(1.0..6.0);
                let world = truth.transform_point(&(cam().lift_unit_plane(&px) * z));
                let pixel = if sigma > 0.0 { Pixel::new(px.u + noise.sample(rng), px.v + noise.sample(rng)) } else { px };
                PointMatch { world, pixel, octave: if z <= 2.0 { 0 } else if z <= 4.0 { 1 } else { 2 } }
            })
            .collect();
        (truth, matches)
    }

    #[test]
    fn jacobian_matches_central_differences() {
        let mut rng = sub_rng(1, 0);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (truth, matches) = setup(&mut rng, 1, 0.0);
            let mut pose = truth;
            let jitter = Tangent::from_fn(|_, _| rng.random_range(-0.05..0.05));
            pose = pose.retract(&jitter);
            let m = &matches[0];
            let Some((_, j)) = reprojection_jacobian(&pose, m, &cam()) else { continue };
            let h = 1e-6;
            for k in 0..6 {
                let mut d = Tangent::zeros();
                d[k] = h;
                let ep = reprojection_residual(&pose.retract(&d), m, &cam()).unwrap();
                let em = reprojection_residual(&pose.retract(&(-d)), m, &cam()).unwrap();
                let fd = (ep - em) / (2.0 * h);
                let col = j.column(k);
                let rel = (fd - col).norm() / col.norm().max(1.0);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn exact_pose_is_a_fixed_point() {
        let mut rng = sub_rng(2, 0);
        let (truth, matches) = setup(&mut rng, 50, 0.0);
        let out = motion_only(&truth, &matches, &cam(), &MotionSettings::default()).unwrap();
        assert!(out.pose.translation_distance(&truth) < 1e-9);
        assert!(out.pose.rotation_angle_to(&truth) < 1e-9);
        assert_eq!(out.inlier_count(), 50);
    }

    #[test]
    fn offset_pose_converges() {
        let mut rng = sub_rng(3, 0);
        for seed in 0..50 {
            let (truth, matches) = setup(&mut rng, 100, 1.0);
            let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
            let rough = Pose::new(*truth.rotation(), truth.translation() + dir * 0.2);
            let out = motion_only(&rough, &matches, &cam(), &MotionSettings::default()).unwrap();
            assert!(out.pose.translation_distance(&truth) < 0.02, "seed {seed}: {}", out.pose.translation_distance(&truth));
        }
    }

    #[test]
    fn inlier_count_is_recomputable() {
        let mut rng = sub_rng(4, 0);
        let (truth, mut matches) = setup(&mut rng, 60, 0.5);
        for m in matches.iter_mut().take(15) {
            m.pixel = Pixel::new(m.pixel.u + 40.0, m.pixel.v - 25.0);
        }
        let out = motion_only(&truth, &matches, &cam(), &MotionSettings::default()).unwrap();
        let recount = matches.iter().filter(|m| chi2(&out.pose, m, &cam()) <= CHI2_GATE).count();
        assert_eq!(out.inlier_count(), recount);
        assert!(out.inliers[..15].iter().all(|&b| !b));
    }
}
