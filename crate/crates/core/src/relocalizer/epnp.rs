//! EPnP and a RANSAC wrapper around it.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::descriptor::octave_scale;
use crate::geometry::{PinholeCamera, Pixel, Pose, Vec3};

/// One 2D-3D correspondence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PointMatch {
    pub world: Vec3,
    pub pixel: Pixel,
    pub octave: u8,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    /// Base inlier gate (px), scaled by `1.2^octave`.
    pub threshold_px: f64,
    pub max_iterations: usize,
    pub confidence: f64,
}

impl Default for RansacParams {
    fn default() -> Self {
        Self { threshold_px: 5.0, max_iterations: 300, confidence: 0.99 }
    }
}

/// Kabsch alignment: `R, t` minimizing `Σ |R a_i + t − b_i|²`.
pub fn align_rigid(a: &[Vec3], b: &[Vec3]) -> Option<(Matrix3<f64>, Vec3)> {
    let n = a.len() as f64;
    let ca = a.iter().sum::<Vec3>() / n;
    let cb = b.iter().sum::<Vec3>() / n;
    let mut h = Matrix3::zeros();
    for (x, y) in a.iter().zip(b) {
        h += (y - cb) * (x - ca).transpose();
    }
    let svd = h.svd(true, true);
    let (u, vt) = (svd.u?, svd.v_t?);
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Some((r, cb - r * ca))
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    a.clone().svd(true, true).solve(b, 1e-12).ok()
}

struct Setup {
    /// World control points.
    controls: Vec<Vec3>,
    /// Barycentric weights per point, one row per point.
    alphas: Vec<Vec<f64>>,
}

fn control_points(world: &[Vec3]) -> Option<Setup> {
    let n = world.len() as f64;
    let c0 = world.iter().sum::<Vec3>() / n;
    let mut cov = Matrix3::zeros();
    for x in world {
        let d = x - c0;
        cov += d * d.transpose();
    }
    cov /= n;
    let eig = SymmetricEigen::new(cov);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lmax = eig.eigenvalues[order[0]];
    if !(lmax > 0.0) {
        return None;
    }
    let planar = eig.eigenvalues[order[2]] < 1e-10 * lmax;
    let axes: Vec<Vec3> = order
        .iter()
        .take(if planar { 2 } else { 3 })
        .map(|&i| eig.eigenvectors.column(i) * eig.eigenvalues[i].max(0.0).sqrt())
        .collect();
    if axes.iter().any(|a| a.norm() < 1e-12) {
        return None;
    }
    let mut controls = vec![c0];
    controls.extend(axes.iter().map(|a| c0 + a));
    let alphas = world
        .iter()
        .map(|x| {
            let d = x - c0;
            // axes are orthogonal, so coordinates are plain projections
            let coords: Vec<f64> = axes.iter().map(|a| d.dot(a) / a.norm_squared()).collect();
            let mut row = vec![1.0 - coords.iter().sum::<f64>()];
            row.extend(coords);
            row
        })
        .collect();
    Some(Setup { controls, alphas })
}

fn control_pairs(c: usize) -> Vec<(usize, usize)> {
    (0..c).flat_map(|i| (i + 1..c).map(move |j| (i, j))).collect()
}

/// Camera-frame control points from kernel combination `betas`.
fn combine(kernel: &[DVector<f64>], betas: &[f64], c: usize) -> Vec<Vec3> {
    (0..c)
        .map(|j| {
            let mut p = Vec3::zeros();
            for (v, b) in kernel.iter().zip(betas) {
                p += Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2]) * *b;
            }
            p
        })
        .collect()
}

fn block(v: &DVector<f64>, j: usize) -> Vec3 {
    Vec3::new(v[3 * j], v[3 * j + 1], v[3 * j + 2])
}

fn beta_residuals(kernel: &[DVector<f64>], rho: &[f64], pairs: &[(usize, usize)], betas: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let k = betas.len();
    let mut jac = DMatrix::zeros(pairs.len(), k);
    let mut res = DVector::zeros(pairs.len());
    for (r, &(i, j)) in pairs.iter().enumerate() {
        let dv: Vec<Vec3> = kernel[..k].iter().map(|v| block(v, i) - block(v, j)).collect();
        let s: Vec3 = dv.iter().zip(betas).map(|(d, b)| d * *b).sum();
        res[r] = rho[r] - s.norm_squared();
        for (c, d) in dv.iter().enumerate() {
            jac[(r, c)] = 2.0 * s.dot(d);
        }
    }
    (res, jac)
}

/// Damped Gauss-Newton on the control-point distance constraints.
fn refine_betas(kernel: &[DVector<f64>], rho: &[f64], pairs: &[(usize, usize)], betas: &mut [f64]) {
    let k = betas.len();
    let (mut res, mut jac) = beta_residuals(kernel, rho, pairs, betas);
    let mut cost = res.norm_squared();
    let mut lambda = 1e-6;
    for _ in 0..50 {
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        let mut accepted = false;
        while lambda < 1e10 {
            let mut a = jtj.clone();
            for i in 0..k {
                a[(i, i)] += lambda * (jtj[(i, i)] + 1e-12);
            }
            let Some(step) = a.cholesky().map(|c| c.solve(&g)) else {
                lambda *= 10.0;
                continue;
            };
            let trial: Vec<f64> = betas.iter().zip(step.iter()).map(|(b, s)| b + s).collect();
            let (r2, j2) = beta_residuals(kernel, rho, pairs, &trial);
            let c2 = r2.norm_squared();
            if c2 < cost {
                betas.copy_from_slice(&trial);
                accepted = cost - c2 > 1e-30 * cost.max(1.0);
                (res, jac, cost) = (r2, j2, c2);
                lambda = (lambda * 0.1).max(1e-12);
                break;
            }
            lambda *= 10.0;
        }
        if !accepted {
            return;
        }
    }
}

fn mean_reprojection(pose_cw: &(Matrix3<f64>, Vec3), world: &[Vec3], normalized: &[(f64, f64)]) -> f64 {
    let mut err = 0.0;
    for (x, &(u, v)) in world.iter().zip(normalized) {
        let y = pose_cw.0 * x + pose_cw.1;
        if !(y.z > 0.0) {
            return f64::INFINITY;
        }
        err += ((y.x / y.z - u).powi(2) + (y.y / y.z - v).powi(2)).sqrt();
    }
    err / world.len() as f64
}

/// Recovers `(β1, β2)` from the linearized products `β1², β1β2, β2²`.
fn two_betas(b11: f64, b12: f64, b22: f64) -> (f64, f64) {
    let (mut b1, b2) = if b11 < 0.0 {
        ((-b11).sqrt(), if b22 < 0.0 { (-b22).sqrt() } else { 0.0 })
    } else {
        (b11.sqrt(), if b22 > 0.0 { b22.sqrt() } else { 0.0 })
    };
    if b12 < 0.0 {
        b1 = -b1;
    }
    (b1, b2)
}

/// EPnP on four or more correspondences. Returns `world_from_camera`.
pub fn epnp(world: &[Vec3], pixels: &[Pixel], cam: &PinholeCamera) -> Option<Pose> {
    if world.len() < 4 || world.len() != pixels.len() {
        return None;
    }
    let setup = control_points(world)?;
    let c = setup.controls.len();
    let normalized: Vec<(f64, f64)> = pixels.iter().map(|p| ((p.u - cam.cx) / cam.fx, (p.v - cam.cy) / cam.fy)).collect();

    let mut m = DMatrix::zeros(2 * world.len(), 3 * c);
    for (i, (alpha, &(u, v))) in setup.alphas.iter().zip(&normalized).enumerate() {
        for (j, &a) in alpha.iter().enumerate() {
            m[(2 * i, 3 * j)] = a;
            m[(2 * i, 3 * j + 2)] = -a * u;
            m[(2 * i + 1, 3 * j + 1)] = a;
            m[(2 * i + 1, 3 * j + 2)] = -a * v;
        }
    }
    let mtm = m.transpose() * &m;
    let eig = SymmetricEigen::new(mtm);
    let mut order: Vec<usize> = (0..3 * c).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let nk = if c == 4 { 4 } else { 3 };
    let kernel: Vec<DVector<f64>> = order[..nk].iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();

    let pairs = control_pairs(c);
    let rho: Vec<f64> = pairs.iter().map(|&(i, j)| (setup.controls[i] - setup.controls[j]).norm_squared()).collect();
    // dot products of kernel differences per pair
    let dot = |a: usize, b: usize, (i, j): (usize, usize)| (block(&kernel[a], i) - block(&kernel[a], j)).dot(&(block(&kernel[b], i) - block(&kernel[b], j)));
    let rho_v = DVector::from_column_slice(&rho);

    let mut candidates: Vec<Vec<f64>> = Vec::new();
    // N = 1 linearization extended to all kernels: unknowns b11, b12, .., b1k
    {
        let cols: Vec<(usize, usize)> = (0..nk).map(|b| (0, b)).collect();
        let l = DMatrix::from_fn(pairs.len(), cols.len(), |r, q| {
            let (a, b) = cols[q];
            if a == b { dot(a, b, pairs[r]) } else { 2.0 * dot(a, b, pairs[r]) }
        });
        if let Some(sol) = lstsq(&l, &rho_v) {
            let b1 = sol[0].abs().sqrt();
            if b1 > 0.0 {
                let sign = sol[0].signum();
                let mut betas = vec![b1];
                betas.extend((1..nk).map(|q| sign * sol[q] / b1));
                candidates.push(betas);
            }
        }
    }
    // each kernel vector alone
    for a in 0..nk {
        let (mut num, mut den) = (0.0, 0.0);
        for (r, &pr) in pairs.iter().enumerate() {
            let l = dot(a, a, pr);
            num += l * rho[r];
            den += l * l;
        }
        if den > 0.0 && num > 0.0 {
            let mut betas = vec![0.0; nk];
            betas[a] = (num / den).sqrt();
            candidates.push(betas);
        }
    }
    // N = 2: b11, b12, b22
    {
        let cols = [(0, 0), (0, 1), (1, 1)];
        let l = DMatrix::from_fn(pairs.len(), 3, |r, q| {
            let (a, b) = cols[q];
            if a == b { dot(a, b, pairs[r]) } else { 2.0 * dot(a, b, pairs[r]) }
        });
        if let Some(sol) = lstsq(&l, &rho_v) {
            let (b1, b2) = two_betas(sol[0], sol[1], sol[2]);
            let mut betas = vec![b1, b2];
            betas.resize(nk, 0.0);
            candidates.push(betas);
        }
    }
    // N = 3 needs six constraints
    if pairs.len() >= 6 {
        let cols = [(0, 0), (0, 1), (1, 1), (0, 2), (1, 2)];
        let l = DMatrix::from_fn(pairs.len(), 5, |r, q| {
            let (a, b) = cols[q];
            if a == b { dot(a, b, pairs[r]) } else { 2.0 * dot(a, b, pairs[r]) }
        });
        if let Some(sol) = lstsq(&l, &rho_v) {
            let (b1, b2) = two_betas(sol[0], sol[1], sol[2]);
            if b1 != 0.0 {
                let mut betas = vec![b1, b2, sol[3] / b1];
                betas.resize(nk, 0.0);
                candidates.push(betas);
            }
        }
    }

    let gn_dims = if c == 4 { 4 } else { 2 };
    let mut best: Option<(f64, (Matrix3<f64>, Vec3))> = None;
    let mut refined = Vec::with_capacity(2 * candidates.len());
    for betas in candidates {
        let mut r = betas.clone();
        let dims = gn_dims.min(r.len());
        refine_betas(&kernel, &rho, &pairs, &mut r[..dims]);
        refined.push(betas);
        refined.push(r);
    }
    for betas in refined {
        let ctrl = combine(&kernel, &betas, c);
        let mut cam_pts: Vec<Vec3> = setup
            .alphas
            .iter()
            .map(|a| a.iter().zip(&ctrl).map(|(w, p)| p * *w).sum())
            .collect();
        if cam_pts.iter().map(|p| p.z).sum::<f64>() < 0.0 {
            cam_pts.iter_mut().for_each(|p| *p = -*p);
        }
        let Some(rt) = align_rigid(world, &cam_pts) else { continue };
        let err = mean_reprojection(&rt, world, &normalized);
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, rt));
        }
    }
    let (_, (r, t)) = best?;
    let pose = Pose::from_rotation_matrix(&r.transpose(), -(r.transpose() * t));
    pose.is_finite().then_some(pose)
}

/// Reprojection error in pixels, infinite behind the camera.
pub fn reprojection_error(pose: &Pose, m: &PointMatch, cam: &PinholeCamera) -> f64 {
    match cam.project(&pose.inverse_transform_point(&m.world)) {
        Some(p) => p.distance(&m.pixel),
        None => f64::INFINITY,
    }
}

fn inliers(pose: &Pose, matches: &[PointMatch], cam: &PinholeCamera, params: &RansacParams) -> Vec<bool> {
    matches
        .iter()
        .map(|m| reprojection_error(pose, m, cam) < params.threshold_px * octave_scale(m.octave))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PnpOutcome {
    pub pose: Pose,
    pub inliers: Vec<bool>,
    pub iterations: usize,
}

impl PnpOutcome {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

/// Iterations needed to draw one all-inlier sample with the given
/// confidence, where `miss` is the chance that a sample is contaminated.
pub(crate) fn adaptive_iterations(miss: f64, confidence: f64, max: usize, done: usize) -> usize {
    if miss <= f64::EPSILON {
        done
    } else if miss >= 1.0 {
        max
    } else {
        ((1.0 - confidence).ln() / miss.ln()).ceil().clamp(1.0, max as f64) as usize
    }
}

/// RANSAC over minimal EPnP samples with adaptive termination, followed by
/// an EPnP refit on the inliers of the best hypothesis.
pub fn pnp_ransac(matches: &[PointMatch], cam: &PinholeCamera, params: &RansacParams, rng: &mut ChaCha8Rng) -> Option<PnpOutcome> {
    let n = matches.len();
    if n < 4 {
        return None;
    }
    let mut best: Option<(usize, Pose, Vec<bool>)> = None;
    let mut needed = params.max_iterations;
    let mut it = 0;
    while it < needed.min(params.max_iterations) {
        it += 1;
        let idx = sample(rng, n, 4);
        let w: Vec<Vec3> = idx.iter().map(|i| matches[i].world).collect();
        let p: Vec<Pixel> = idx.iter().map(|i| matches[i].pixel).collect();
        let Some(pose) = epnp(&w, &p, cam) else { continue };
        let mask = inliers(&pose, matches, cam, params);
        let count = mask.iter().filter(|&&b| b).count();
        if best.as_ref().is_none_or(|(c, _, _)| count > *c) {
            let ratio = count as f64 / n as f64;
            let miss = 1.0 - ratio.powi(4);
            needed = adaptive_iterations(miss, params.confidence, params.max_iterations, it);
            best = Some((count, pose, mask));
        }
    }
    let (count, mut pose, mut mask) = best?;
    if count < 4 {
        return None;
    }
    let w: Vec<Vec3> = matches.iter().zip(&mask).filter(|(_, &b)| b).map(|(m, _)| m.world).collect();
    let p: Vec<Pixel> = matches.iter().zip(&mask).filter(|(_, &b)| b).map(|(m, _)| m.pixel).collect();
    if let Some(refit) = epnp(&w, &p, cam) {
        let refit_mask = inliers(&refit, matches, cam, params);
        if refit_mask.iter().filter(|&&b| b).count() >= count {
            pose = refit;
            mask = refit_mask;
        }
    }
    Some(PnpOutcome { pose, inliers: mask, iterations: it })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::look_rotation;
    use crate::simulator::sub_rng;
    use rand::Rng;

    fn cam() -> PinholeCamera {
        PinholeCamera::new(400.0, 400.0, 376.0, 240.0, 752, 480).unwrap()
    }

    fn random_pose(rng: &mut ChaCha8Rng) -> Pose {
        let f = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.3..0.3));
        let r = look_rotation(&f, &Vec3::z()).unwrap();
        Pose::from_rotation_matrix(&r, Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..2.0)))
    }

    /// Points in front of the camera, optionally on one plane.
    fn scene(pose: &Pose, n: usize, planar: bool, rng: &mut ChaCha8Rng) -> (Vec<Vec3>, Vec<Pixel>) {
        let mut w = Vec::new();
        let mut p = Vec::new();
        while w.len() < n {
            let z = if planar { 4.0 } else { rng.random_range(2.0..8.0) };
            let px = Pixel::new(rng.random_range(20.0..730.0), rng.random_range(20.0..460.0));
            let xc = cam().lift_unit_plane(&px) * z;
            w.push(pose.transform_point(&xc));
            p.push(px);
        }
        (w, p)
    }

    #[test]
    fn exact_correspondences_recover_the_pose() {
        let mut rng = sub_rng(1, 0);
        for trial in 0..200 {
            let truth = random_pose(&mut rng);
            let n = 6 + trial % 20;
            let (w, p) = scene(&truth, n, false, &mut rng);
            let est = epnp(&w, &p, &cam()).unwrap();
            assert!(est.translation_distance(&truth) < 1e-6, "trial {trial}: {}", est.translation_distance(&truth));
            assert!(est.rotation_angle_to(&truth) < 1e-6);
        }
    }

    #[test]
    fn planar_points_recover_the_pose() {
        let mut rng = sub_rng(2, 0);
        for _ in 0..100 {
            let truth = random_pose(&mut rng);
            let (w, p) = scene(&truth, 12, true, &mut rng);
            let est = epnp(&w, &p, &cam()).unwrap();
            assert!(est.translation_distance(&truth) < 1e-4);
        }
    }

    #[test]
    fn minimal_sample_is_consistent() {
        let mut rng = sub_rng(3, 0);
        let mut good = 0;
        for _ in 0..200 {
            let truth = random_pose(&mut rng);
            let (w, p) = scene(&truth, 4, false, &mut rng);
            if let Some(est) = epnp(&w, &p, &cam()) {
                let err: f64 = w.iter().zip(&p).map(|(x, px)| cam().project(&est.inverse_transform_point(x)).map_or(1e9, |q| q.distance(px))).fold(0.0, f64::max);
                if err < 1e-3 {
                    good += 1;
                }
            }
        }
        assert!(good >= 190, "{good}/200 minimal samples reprojected exactly");
    }

    #[test]
    fn ransac_rejects_planted_outliers() {
        let mut rng = sub_rng(4, 0);
        let mut ok = 0;
        for seed in 0..100 {
            let truth = random_pose(&mut rng);
            let (w, p) = scene(&truth, 60, false, &mut rng);
            let mut matches: Vec<PointMatch> = w.iter().zip(&p).map(|(w, p)| PointMatch { world: *w, pixel: *p, octave: 0 }).collect();
            for m in matches.iter_mut().take(24) {
                m.pixel = Pixel::new(rng.random_range(0.0..752.0), rng.random_range(0.0..480.0));
            }
            let out = pnp_ransac(&matches, &cam(), &RansacParams::default(), &mut sub_rng(seed, 1)).unwrap();
            if out.pose.translation_distance(&truth) < 0.05 {
                ok += 1;
            }
        }
        assert!(ok >= 95, "{ok}/100");
    }

    #[test]
    fn too_few_matches_fail() {
        let m = PointMatch { world: Vec3::new(0.0, 0.0, 1.0), pixel: Pixel::new(1.0, 1.0), octave: 0 };
        assert!(pnp_ransac(&[m; 3], &cam(), &RansacParams::default(), &mut sub_rng(0, 0)).is_none());
    }
}
