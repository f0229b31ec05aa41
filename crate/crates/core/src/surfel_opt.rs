//! Keyframe pose refinement with reprojection constraints induced by surfel
//! planes, and the matching map point refresh.
//!
//! A factor ties an anchor keyframe α (the first observer of a map point) to
//! another observer β. The anchor pixel's ray is intersected with the point's
//! surfel plane and the intersection is reprojected into β. Poses are perturbed
//! on the right, `T · exp(δ)` with `δ = (v, ω)`.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix2x6, Matrix3, Matrix6, Vector2, Vector6};
use thiserror::Error;

use crate::database::{KeyframeId, MapPointId, VisualDatabase};
use crate::descriptor::octave_scale;
use crate::geometry::{hat, PinholeCamera, Pixel, Pose, Vec3};
use crate::surfel_map::{PlaneCoeff, SurfelMap};

/// Smallest admissible `|nᵀt + d|` (camera distance to the plane, m).
pub const EPS_DENOMINATOR: f64 = 1e-6;
/// Smallest admissible anchor inverse depth (1/m).
pub const RHO_MIN: f64 = 1e-4;
/// Largest admissible depth of the reprojected point in the target frame (m).
pub const MAX_DEPTH: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Error)]
pub enum FactorError {
    #[error("camera lies on the plane")]
    DegenerateDenominator,
    #[error("ray meets the plane behind the camera or too far away")]
    BadInverseDepth,
    #[error("reprojected point is behind or too far from the target camera")]
    BadTargetDepth,
}

/// Inverse depth along the anchor pixel's ray at which it meets `plane`.
pub fn inverse_depth_on_plane(pose: &Pose, pixel: &Pixel, plane: &PlaneCoeff, cam: &PinholeCamera) -> Result<f64, FactorError> {
    let den = plane.n.dot(pose.translation()) + plane.d;
    if den.abs() <= EPS_DENOMINATOR {
        return Err(FactorError::DegenerateDenominator);
    }
    let f = cam.lift_unit_plane(pixel);
    let rho = -plane.n.dot(&(pose.rotation_matrix() * f)) / den;
    if !(rho > RHO_MIN) || !rho.is_finite() {
        return Err(FactorError::BadInverseDepth);
    }
    Ok(rho)
}

/// World point where the anchor pixel's ray meets `plane`.
pub fn point_on_plane(pose: &Pose, pixel: &Pixel, plane: &PlaneCoeff, cam: &PinholeCamera) -> Result<Vec3, FactorError> {
    let rho = inverse_depth_on_plane(pose, pixel, plane, cam)?;
    Ok(pose.transform_point(&(cam.lift_unit_plane(pixel) / rho)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SurfelReprojFactor {
    pub point: MapPointId,
    pub plane: PlaneCoeff,
    pub anchor: KeyframeId,
    pub anchor_pixel: Pixel,
    pub target: KeyframeId,
    pub target_pixel: Pixel,
    /// Octave of the target keypoint.
    pub octave: u8,
}

impl SurfelReprojFactor {
    pub fn weight(&self) -> f64 {
        1.0 / octave_scale(self.octave).powi(2)
    }
}

/// Residual `Π(R_βᵀ(x_W − t_β)) − p_β` in pixels.
pub fn surfel_reproj_residual(f: &SurfelReprojFactor, pose_a: &Pose, pose_b: &Pose, cam: &PinholeCamera) -> Result<Vector2<f64>, FactorError> {
    let x = point_on_plane(pose_a, &f.anchor_pixel, &f.plane, cam)?;
    let y = pose_b.inverse_transform_point(&x);
    if !(y.z > 0.0) || y.z > MAX_DEPTH {
        return Err(FactorError::BadTargetDepth);
    }
    let p = cam.project(&y).ok_or(FactorError::BadTargetDepth)?;
    Ok(Vector2::new(p.u - f.target_pixel.u, p.v - f.target_pixel.v))
}

/// Residual with its Jacobians with respect to the anchor and target tangents.
pub fn surfel_reproj_jacobians(
    f: &SurfelReprojFactor,
    pose_a: &Pose,
    pose_b: &Pose,
    cam: &PinholeCamera,
) -> Result<(Vector2<f64>, Matrix2x6<f64>, Matrix2x6<f64>), FactorError> {
    let rho = inverse_depth_on_plane(pose_a, &f.anchor_pixel, &f.plane, cam)?;
    let ra = pose_a.rotation_matrix();
    let rb = pose_b.rotation_matrix();
    let ray = cam.lift_unit_plane(&f.anchor_pixel);
    let g = ra * ray;
    let s = 1.0 / rho;
    let x = pose_a.translation() + g * s;
    let y = rb.transpose() * (x - pose_b.translation());
    if !(y.z > 0.0) || y.z > MAX_DEPTH {
        return Err(FactorError::BadTargetDepth);
    }
    let (p, jpi) = cam.project_with_jacobian(&y).ok_or(FactorError::BadTargetDepth)?;
    let e = Vector2::new(p.u - f.target_pixel.u, p.v - f.target_pixel.v);

    // Moving the anchor slides the intersection within the plane.
    let proj = Matrix3::identity() - g * f.plane.n.transpose() / f.plane.n.dot(&g);
    let dx_dv = proj * ra;
    let dx_dw = -s * proj * ra * hat(&ray);
    let jy_x = jpi * rb.transpose();
    let mut ja = Matrix2x6::zeros();
    ja.fixed_view_mut::<2, 3>(0, 0).copy_from(&(jy_x * dx_dv));
    ja.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jy_x * dx_dw));

    let mut jb = Matrix2x6::zeros();
    jb.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-jpi));
    jb.fixed_view_mut::<2, 3>(0, 3).copy_from(&(jpi * hat(&y)));
    Ok((e, ja, jb))
}

/// Huber cost of a squared whitened norm, and its IRLS weight.
pub fn huber(sq: f64, delta: f64) -> (f64, f64) {
    if sq <= delta * delta {
        (sq, 1.0)
    } else {
        let n = sq.sqrt();
        (2.0 * delta * n - delta * delta, delta / n)
    }
}

/// Factors of the current database: each map point's first observer paired
/// with every other observer.
pub fn build_factors(db: &VisualDatabase, map: &SurfelMap) -> Vec<SurfelReprojFactor> {
    let mut out = Vec::new();
    for p in db.map_points().values() {
        let Some(plane) = map.plane_coeff(p.surfel) else { continue };
        let Some((anchor, ai)) = p.anchor() else { continue };
        let anchor_kp = db.keyframes()[&anchor].features.keypoints()[ai as usize];
        for (&target, &ti) in p.observations.iter().skip(1) {
            let kp = db.keyframes()[&target].features.keypoints()[ti as usize];
            out.push(SurfelReprojFactor {
                point: p.id,
                plane,
                anchor,
                anchor_pixel: anchor_kp.position,
                target,
                target_pixel: kp.position,
                octave: kp.octave,
            });
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerSettings {
    /// Huber threshold on the whitened residual norm (px).
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    /// Classify-and-rerun rounds after the first run.
    pub outlier_rounds: usize,
    /// Whitened squared error above which a factor is an outlier.
    pub outlier_gate: f64,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        Self { huber_delta: 2.0, max_iterations: 50, relative_tolerance: 1e-8, initial_damping: 1e-4, outlier_rounds: 3, outlier_gate: 5.991 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizationStatus {
    Converged,
    MaxIterations,
    /// Damping grew without finding a cost decrease.
    Stalled,
    /// Nothing to optimize; database untouched.
    NoFactors,
    /// Non-finite cost; database untouched.
    Diverged,
}

impl OptimizationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            OptimizationStatus::Converged => "converged",
            OptimizationStatus::MaxIterations => "max_iterations",
            OptimizationStatus::Stalled => "stalled",
            OptimizationStatus::NoFactors => "no_factors",
            OptimizationStatus::Diverged => "diverged",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub damping: f64,
    pub accepted: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizationReport {
    pub status: OptimizationStatus,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub residuals: usize,
    pub skipped: usize,
    /// Factors excluded by the final outlier classification.
    pub rejected: usize,
    /// Norm of the total tangent update per optimized keyframe.
    pub pose_updates: BTreeMap<KeyframeId, f64>,
    pub history: Vec<IterationRecord>,
}

impl OptimizationReport {
    pub fn max_pose_update(&self) -> f64 {
        self.pose_updates.values().copied().fold(0.0, f64::max)
    }

    /// Per-iteration cost as CSV.
    pub fn write_cost_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "iteration,cost,damping,accepted")?;
        for r in &self.history {
            writeln!(w, "{},{},{},{}", r.iteration, r.cost, r.damping, r.accepted as u8)?;
        }
        Ok(())
    }
}

impl fmt::Display for OptimizationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "status={}", self.status.as_str())?;
        writeln!(f, "initial_cost={}", self.initial_cost)?;
        writeln!(f, "final_cost={}", self.final_cost)?;
        writeln!(f, "iterations={}", self.iterations)?;
        writeln!(f, "residuals={}", self.residuals)?;
        writeln!(f, "skipped={}", self.skipped)?;
        writeln!(f, "rejected={}", self.rejected)?;
        writeln!(f, "optimized_poses={}", self.pose_updates.len())?;
        write!(f, "max_pose_update={}", self.max_pose_update())
    }
}

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("database has fewer than two keyframes sharing a map point")]
    NotEnoughKeyframes,
}

struct Problem<'a> {
    factors: Vec<&'a SurfelReprojFactor>,
    /// Keyframe -> variable block index.
    blocks: BTreeMap<KeyframeId, usize>,
    cam: PinholeCamera,
    delta: f64,
}

impl Problem<'_> {
    fn cost(&self, poses: &BTreeMap<KeyframeId, Pose>) -> Option<f64> {
        let mut total = 0.0;
        for f in &self.factors {
            let e = surfel_reproj_residual(f, &poses[&f.anchor], &poses[&f.target], &self.cam).ok()?;
            total += huber(f.weight() * e.norm_squared(), self.delta).0;
        }
        total.is_finite().then_some(total)
    }

    fn normal_equations(&self, poses: &BTreeMap<KeyframeId, Pose>) -> Option<(DMatrix<f64>, DVector<f64>)> {
        let n = self.blocks.len() * 6;
        let mut h = DMatrix::zeros(n, n);
        let mut b = DVector::zeros(n);
        for f in &self.factors {
            let (e, ja, jb) = surfel_reproj_jacobians(f, &poses[&f.anchor], &poses[&f.target], &self.cam).ok()?;
            let w = f.weight();
            let (_, irls) = huber(w * e.norm_squared(), self.delta);
            let ww = w * irls;
            let (ia, ib) = (self.blocks[&f.anchor] * 6, self.blocks[&f.target] * 6);
            let haa: Matrix6<f64> = ja.transpose() * ja * ww;
            let hbb: Matrix6<f64> = jb.transpose() * jb * ww;
            let hab: Matrix6<f64> = ja.transpose() * jb * ww;
            let ga: Vector6<f64> = ja.transpose() * e * ww;
            let gb: Vector6<f64> = jb.transpose() * e * ww;
            let mut add = |r: usize, c: usize, m: &Matrix6<f64>| {
                let mut view = h.view_mut((r, c), (6, 6));
                view += m;
            };
            add(ia, ia, &haa);
            add(ib, ib, &hbb);
            add(ia, ib, &hab);
            add(ib, ia, &hab.transpose());
            let mut bv = b.rows_mut(ia, 6);
            bv += ga;
            let mut bv = b.rows_mut(ib, 6);
            bv += gb;
        }
        Some((h, b))
    }
}

/// Outcome of one Levenberg–Marquardt run.
struct LmRun {
    poses: BTreeMap<KeyframeId, Pose>,
    status: OptimizationStatus,
    iterations: usize,
}

fn blocks_of(factors: &[&SurfelReprojFactor]) -> BTreeMap<KeyframeId, usize> {
    let mut keys: Vec<KeyframeId> = factors.iter().flat_map(|f| [f.anchor, f.target]).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().enumerate().map(|(i, k)| (k, i)).collect()
}

fn levenberg_marquardt(
    problem: &Problem,
    mut poses: BTreeMap<KeyframeId, Pose>,
    settings: &OptimizerSettings,
    history: &mut Vec<IterationRecord>,
) -> LmRun {
    let Some(mut cost) = problem.cost(&poses) else {
        return LmRun { poses, status: OptimizationStatus::Diverged, iterations: 0 };
    };
    let mut lambda = settings.initial_damping;
    let mut status = OptimizationStatus::MaxIterations;
    let mut iterations = 0;
    let mut system = None;
    let mut rebuild = true;
    for it in 1..=settings.max_iterations {
        iterations = it;
        if cost <= f64::MIN_POSITIVE {
            status = OptimizationStatus::Converged;
            break;
        }
        if rebuild {
            system = problem.normal_equations(&poses);
            rebuild = false;
        }
        let Some((h, b)) = system.as_ref() else {
            status = OptimizationStatus::Diverged;
            break;
        };
        let mut damped = h.clone();
        for i in 0..damped.nrows() {
            damped[(i, i)] += lambda * (h[(i, i)] + 1e-9);
        }
        let step = damped.cholesky().map(|c| c.solve(&(-b)));
        let candidate = step.as_ref().map(|dx| {
            let mut c = poses.clone();
            for (k, &i) in &problem.blocks {
                let d = Vector6::from_iterator(dx.rows(i * 6, 6).iter().copied());
                c.insert(*k, poses[k].retract(&d));
            }
            c
        });
        let new_cost = candidate.as_ref().and_then(|c| problem.cost(c));
        match (candidate, new_cost) {
            (Some(c), Some(nc)) if nc < cost => {
                let rel = (cost - nc) / cost;
                poses = c;
                cost = nc;
                lambda = (lambda * 0.5).max(1e-12);
                rebuild = true;
                history.push(IterationRecord { iteration: history.len(), cost, damping: lambda, accepted: true });
                if rel < settings.relative_tolerance {
                    status = OptimizationStatus::Converged;
                    break;
                }
            }
            _ => {
                lambda *= 10.0;
                history.push(IterationRecord { iteration: history.len(), cost, damping: lambda, accepted: false });
                if lambda > 1e12 {
                    status = OptimizationStatus::Stalled;
                    break;
                }
            }
        }
    }
    LmRun { poses, status, iterations }
}

/// Levenberg–Marquardt over keyframe pose tangents with surfel planes fixed,
/// alternated with outlier classification: after each run, factors whose
/// whitened squared error exceeds `outlier_gate` are dropped and the run is
/// repeated. Poses are written back only when every run ends with a finite
/// cost. Reported costs cover all valid factors.
pub fn optimize_poses(db: &mut VisualDatabase, map: &SurfelMap, settings: &OptimizerSettings) -> Result<OptimizationReport, OptimizeError> {
    if db.covisibility().edge_count() == 0 {
        return Err(OptimizeError::NotEnoughKeyframes);
    }
    let cam = *db.camera();
    let all = build_factors(db, map);
    let initial_poses: BTreeMap<KeyframeId, Pose> = db.keyframes().iter().map(|(&k, kf)| (k, kf.pose)).collect();

    let mut factors = Vec::new();
    let mut skipped = 0;
    for f in &all {
        match surfel_reproj_residual(f, &initial_poses[&f.anchor], &initial_poses[&f.target], &cam) {
            Ok(e) if e.iter().all(|v| v.is_finite()) => factors.push(f),
            _ => skipped += 1,
        }
    }
    let mut report = OptimizationReport {
        status: OptimizationStatus::NoFactors,
        initial_cost: 0.0,
        final_cost: 0.0,
        iterations: 0,
        residuals: factors.len(),
        skipped,
        rejected: 0,
        pose_updates: BTreeMap::new(),
        history: Vec::new(),
    };
    if factors.is_empty() {
        return Ok(report);
    }
    let full = Problem { blocks: blocks_of(&factors), factors: factors.clone(), cam, delta: settings.huber_delta };
    let Some(initial_cost) = full.cost(&initial_poses) else {
        report.status = OptimizationStatus::Diverged;
        return Ok(report);
    };
    report.initial_cost = initial_cost;
    report.final_cost = initial_cost;
    report.history.push(IterationRecord { iteration: 0, cost: initial_cost, damping: settings.initial_damping, accepted: true });

    let mut poses = initial_poses.clone();
    let mut active = factors.clone();
    let mut status = OptimizationStatus::NoFactors;
    for round in 0..=settings.outlier_rounds {
        let problem = Problem { blocks: blocks_of(&active), factors: active.clone(), cam, delta: settings.huber_delta };
        let run = levenberg_marquardt(&problem, poses.clone(), settings, &mut report.history);
        report.iterations += run.iterations;
        status = run.status;
        if status == OptimizationStatus::Diverged {
            break;
        }
        poses = run.poses;
        if round == settings.outlier_rounds {
            break;
        }
        let keep: Vec<&SurfelReprojFactor> = factors
            .iter()
            .copied()
            .filter(|f| match surfel_reproj_residual(f, &poses[&f.anchor], &poses[&f.target], &cam) {
                Ok(e) => f.weight() * e.norm_squared() <= settings.outlier_gate,
                Err(_) => false,
            })
            .collect();
        if keep.len() == active.len() && keep.iter().zip(&active).all(|(a, b)| std::ptr::eq(*a, *b)) || keep.is_empty() {
            break;
        }
        active = keep;
    }
    report.rejected = factors.len() - active.len();
    let final_cost = full.cost(&poses);
    match final_cost {
        Some(c) if status != OptimizationStatus::Diverged => {
            report.status = status;
            report.final_cost = c;
        }
        _ => {
            report.status = OptimizationStatus::Diverged;
            return Ok(report);
        }
    }
    for (k, after) in &poses {
        let before = &initial_poses[k];
        if !full.blocks.contains_key(k) {
            continue;
        }
        report.pose_updates.insert(*k, before.inverse().compose(after).log().norm());
        db.set_pose(*k, *after).expect("optimized keyframe exists");
    }
    Ok(report)
}

/// Counts from a map point refresh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct RefreshReport {
    pub updated: usize,
    pub degenerate: usize,
}

/// Re-places every map point on its surfel plane along its anchor keypoint's
/// ray; degenerate geometry leaves the point where it was.
pub fn refresh_map_points(db: &mut VisualDatabase, map: &SurfelMap) -> RefreshReport {
    let cam = *db.camera();
    let mut report = RefreshReport::default();
    let mut updates = Vec::new();
    for p in db.map_points().values() {
        let (Some(plane), Some((anchor, idx))) = (map.plane_coeff(p.surfel), p.anchor()) else {
            report.degenerate += 1;
            continue;
        };
        let kf = &db.keyframes()[&anchor];
        let pixel = kf.features.keypoints()[idx as usize].position;
        match point_on_plane(&kf.pose, &pixel, &plane, &cam) {
            Ok(x) => updates.push((p.id, x)),
            Err(_) => report.degenerate += 1,
        }
    }
    for (id, x) in updates {
        db.set_point_position(id, x).expect("point exists");
        report.updated += 1;
    }
    report
}
