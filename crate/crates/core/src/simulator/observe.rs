use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::scene::{flip_bits, Scene};
use super::SimError;
use crate::descriptor::{octave_scale, Descriptor, Keypoint, LocalFeatures};
use crate::geometry::{PinholeCamera, Pixel, Pose, TimedPose};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    /// Standard deviation of keypoint position noise (px).
    pub pixel_sigma: f64,
    /// Bits flipped in every observed descriptor.
    pub descriptor_flips: u32,
    /// Standard deviation of database position noise (m).
    pub pose_sigma: f64,
    /// Fraction of observations replaced by random descriptors.
    pub outlier_fraction: f64,
    /// Probability that a visible landmark is not detected.
    pub dropout: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { pixel_sigma: 0.0, descriptor_flips: 0, pose_sigma: 0.0, outlier_fraction: 0.0, dropout: 0.0 }
    }
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let probs = [self.outlier_fraction, self.dropout].iter().all(|p| (0.0..=1.0).contains(p));
        if !(self.pixel_sigma >= 0.0 && self.pose_sigma >= 0.0 && probs) || self.descriptor_flips as usize > Descriptor::BITS {
            return Err(SimError::InvalidSpec("noise parameters out of range".into()));
        }
        Ok(())
    }
}

/// Detector model: which visible landmarks produce keypoints.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SensorSpec {
    pub max_range: f64,
    /// Largest angle between the viewing ray and the surface normal (deg).
    pub max_incidence_deg: f64,
    pub max_observations: usize,
    /// Keypoint size at octave 0 (px); grows by 1.2 per octave.
    pub keypoint_size: f64,
}

impl Default for SensorSpec {
    fn default() -> Self {
        Self { max_range: 12.0, max_incidence_deg: 75.0, max_observations: 1000, keypoint_size: 31.0 }
    }
}

/// Octave from camera depth: `≤ 2 m → 0`, `≤ 4 m → 1`, otherwise 2.
pub fn depth_octave(z: f64) -> u8 {
    if z <= 2.0 {
        0
    } else if z <= 4.0 {
        1
    } else {
        2
    }
}

/// One simulated image: true pose, extracted features and the landmark
/// behind each keypoint (`None` for outliers).
#[derive(Clone, Debug, PartialEq)]
pub struct SimFrame {
    pub timestamp: f64,
    pub pose: Pose,
    pub features: LocalFeatures,
    pub landmarks: Vec<Option<u32>>,
    pub place: u32,
}

/// Visible landmarks before any noise, nearest first, as `(id, distance, depth)`.
pub fn visible_landmarks(scene: &Scene, pose: &Pose, cam: &PinholeCamera, sensor: &SensorSpec) -> Vec<(u32, f64, f64)> {
    let center = pose.translation();
    let cos_max = sensor.max_incidence_deg.to_radians().cos();
    let mut out = Vec::new();
    for lm in &scene.landmarks {
        let plane = &scene.planes[lm.plane as usize];
        let ray = lm.position - center;
        let dist = ray.norm();
        if !(dist > 0.0 && dist <= sensor.max_range) {
            continue;
        }
        // front-facing and not too grazing
        if -plane.normal.dot(&ray) / dist < cos_max {
            continue;
        }
        let xc = pose.inverse_transform_point(&lm.position);
        let Some(px) = cam.project(&xc) else { continue };
        if !cam.contains(&px) {
            continue;
        }
        let occluded = scene
            .planes
            .iter()
            .enumerate()
            .any(|(i, p)| i != lm.plane as usize && p.segment_hit(center, &lm.position).is_some());
        if !occluded {
            out.push((lm.id, dist, xc.z));
        }
    }
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

/// Simulates feature extraction at `pose`.
pub fn observe(
    scene: &Scene,
    pose: &Pose,
    cam: &PinholeCamera,
    noise: &NoiseSpec,
    sensor: &SensorSpec,
    rng: &mut ChaCha8Rng,
) -> Result<(LocalFeatures, Vec<Option<u32>>), SimError> {
    noise.validate()?;
    let pixel_noise = Normal::new(0.0, noise.pixel_sigma).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    let mut ids = Vec::new();
    for (id, _, depth) in visible_landmarks(scene, pose, cam, sensor) {
        if keypoints.len() >= sensor.max_observations {
            break;
        }
        if noise.dropout > 0.0 && rng.random_bool(noise.dropout) {
            continue;
        }
        let lm = &scene.landmarks[id as usize];
        let exact = cam.project(&pose.inverse_transform_point(&lm.position)).expect("visible landmark projects");
        let position = if noise.pixel_sigma > 0.0 {
            Pixel::new(exact.u + pixel_noise.sample(rng), exact.v + pixel_noise.sample(rng))
        } else {
            exact
        };
        if !cam.contains(&position) {
            continue;
        }
        let octave = depth_octave(depth);
        let kp = Keypoint { position, size: sensor.keypoint_size * octave_scale(octave), octave };
        let outlier = noise.outlier_fraction > 0.0 && rng.random_bool(noise.outlier_fraction);
        if outlier {
            descriptors.push(Descriptor::from_words(rng.random()));
            ids.push(None);
        } else {
            descriptors.push(flip_bits(&lm.descriptor, noise.descriptor_flips, rng));
            ids.push(Some(id));
        }
        keypoints.push(kp);
    }
    let features = LocalFeatures::new(keypoints, descriptors).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    Ok((features, ids))
}

/// Adds i.i.d. Gaussian noise of standard deviation `sigma` to every
/// position; rotations are untouched.
pub fn perturb_poses(poses: &[TimedPose], sigma: f64, rng: &mut ChaCha8Rng) -> Result<Vec<TimedPose>, SimError> {
    let normal = Normal::new(0.0, sigma).map_err(|_| SimError::InvalidSpec(format!("pose sigma {sigma} must be >= 0")))?;
    Ok(poses
        .iter()
        .map(|p| {
            if sigma == 0.0 {
                return *p;
            }
            let mut t = *p.pose.translation();
            for c in t.iter_mut() {
                *c += normal.sample(rng);
            }
            TimedPose { timestamp: p.timestamp, pose: Pose::new(*p.pose.rotation(), t) }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{look_rotation, Vec3};
    use crate::simulator::{generate_scene, sub_rng, SceneKind, SceneSpec};

    fn room() -> Scene {
        generate_scene(&SceneSpec::new(SceneKind::Room { size: Vec3::new(4.0, 4.0, 3.0) }, 0.1, 5.0, 7)).unwrap()
    }

    fn cam() -> PinholeCamera {
        PinholeCamera::new(400.0, 400.0, 376.0, 240.0, 752, 480).unwrap()
    }

    fn looking(from: Vec3, forward: Vec3) -> Pose {
        Pose::from_rotation_matrix(&look_rotation(&forward, &Vec3::z()).unwrap(), from)
    }

    #[test]
    fn noiseless_keypoints_are_exact_projections() {
        let scene = room();
        let pose = looking(Vec3::new(2.0, 2.0, 1.5), Vec3::new(1.0, 0.3, 0.0));
        let (f, ids) = observe(&scene, &pose, &cam(), &NoiseSpec::default(), &SensorSpec::default(), &mut sub_rng(1, 0)).unwrap();
        assert!(f.len() > 10);
        for (kp, id) in f.keypoints().iter().zip(&ids) {
            let lm = &scene.landmarks[id.unwrap() as usize];
            let exact = cam().project(&pose.inverse_transform_point(&lm.position)).unwrap();
            assert_eq!(kp.position, exact);
            assert_eq!(f.descriptors()[ids.iter().position(|x| x == id).unwrap()], lm.descriptor);
        }
    }

    #[test]
    fn landmarks_behind_the_camera_are_never_seen() {
        let scene = room();
        let pose = looking(Vec3::new(2.0, 2.0, 1.5), Vec3::x());
        let (_, ids) = observe(&scene, &pose, &cam(), &NoiseSpec::default(), &SensorSpec::default(), &mut sub_rng(1, 0)).unwrap();
        for id in ids.into_iter().flatten() {
            assert!(pose.inverse_transform_point(&scene.landmarks[id as usize].position).z > 0.0);
        }
    }

    #[test]
    fn observations_are_capped_nearest_first() {
        let scene = room();
        let pose = looking(Vec3::new(2.0, 2.0, 1.5), Vec3::new(1.0, 1.0, 0.0));
        let sensor = SensorSpec { max_observations: 20, ..SensorSpec::default() };
        let all = visible_landmarks(&scene, &pose, &cam(), &SensorSpec::default());
        let (f, ids) = observe(&scene, &pose, &cam(), &NoiseSpec::default(), &sensor, &mut sub_rng(1, 0)).unwrap();
        assert_eq!(f.len(), 20);
        let expect: Vec<_> = all.iter().take(20).map(|v| Some(v.0)).collect();
        assert_eq!(ids, expect);
    }

    #[test]
    fn occlusion_matches_ray_marching() {
        // Two rooms side by side: walls of the first hide the second.
        let mut spec = SceneSpec::new(SceneKind::Room { size: Vec3::new(4.0, 4.0, 3.0) }, 0.1, 5.0, 3);
        spec.copies = 2;
        spec.copy_gap = 0.5;
        let scene = generate_scene(&spec).unwrap();
        let sensor = SensorSpec { max_range: 100.0, max_incidence_deg: 90.0, max_observations: usize::MAX, keypoint_size: 15.0 };
        let mut rng = sub_rng(9, 0);
        for _ in 0..20 {
            let from = Vec3::new(rng.random_range(0.5..8.0), rng.random_range(0.5..3.5), rng.random_range(0.5..2.5));
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let pose = looking(from, Vec3::new(a.cos(), a.sin(), 0.0));
            let seen: std::collections::BTreeSet<u32> = visible_landmarks(&scene, &pose, &cam(), &sensor).iter().map(|v| v.0).collect();
            for lm in &scene.landmarks {
                let xc = pose.inverse_transform_point(&lm.position);
                let in_view = cam().project(&xc).is_some_and(|p| cam().contains(&p));
                let facing = scene.planes[lm.plane as usize].normal.dot(&(lm.position - from)) < 0.0;
                if !in_view || !facing {
                    assert!(!seen.contains(&lm.id));
                    continue;
                }
                // march along the ray and test every plane's signed side change inside its bounds
                let steps = 4000;
                let mut blocked = false;
                for (pi, p) in scene.planes.iter().enumerate() {
                    if pi == lm.plane as usize {
                        continue;
                    }
                    let side = |x: &Vec3| p.normal.dot(&(x - p.origin));
                    let mut prev = from;
                    for s in 1..steps {
                        let cur = from + (lm.position - from) * (s as f64 / steps as f64);
                        if side(&prev).signum() != side(&cur).signum() {
                            let rel = cur - p.origin;
                            let (a, b) = (rel.dot(&p.u), rel.dot(&p.v));
                            if (0.0..=p.u_len).contains(&a) && (0.0..=p.v_len).contains(&b) {
                                blocked = true;
                            }
                        }
                        prev = cur;
                    }
                }
                assert_eq!(seen.contains(&lm.id), !blocked, "landmark {}", lm.id);
            }
        }
    }

    #[test]
    fn flips_and_outliers_follow_the_noise_spec() {
        let scene = room();
        let pose = looking(Vec3::new(2.0, 2.0, 1.5), Vec3::new(-1.0, 0.2, 0.0));
        let noise = NoiseSpec { descriptor_flips: 12, outlier_fraction: 0.25, ..NoiseSpec::default() };
        let (f, ids) = observe(&scene, &pose, &cam(), &noise, &SensorSpec::default(), &mut sub_rng(4, 0)).unwrap();
        let outliers = ids.iter().filter(|i| i.is_none()).count() as f64 / ids.len() as f64;
        assert!((outliers - 0.25).abs() < 0.1, "outlier rate {outliers}");
        for (d, id) in f.descriptors().iter().zip(&ids) {
            if let Some(id) = id {
                assert_eq!(d.hamming(&scene.landmarks[*id as usize].descriptor), 12);
            }
        }
    }

    #[test]
    fn pixel_noise_stays_within_three_sigma() {
        let scene = room();
        let pose = looking(Vec3::new(2.0, 2.0, 1.5), Vec3::new(0.2, 1.0, 0.0));
        let noise = NoiseSpec { pixel_sigma: 1.0, ..NoiseSpec::default() };
        let (f, ids) = observe(&scene, &pose, &cam(), &noise, &SensorSpec::default(), &mut sub_rng(5, 0)).unwrap();
        let mut within = 0;
        for (kp, id) in f.keypoints().iter().zip(&ids) {
            let exact = cam().project(&pose.inverse_transform_point(&scene.landmarks[id.unwrap() as usize].position)).unwrap();
            let (du, dv) = (kp.position.u - exact.u, kp.position.v - exact.v);
            if du.abs() <= 3.0 && dv.abs() <= 3.0 {
                within += 1;
            }
        }
        assert!(within as f64 >= 0.99 * f.len() as f64);
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let poses: Vec<TimedPose> = (0..5)
            .map(|i| TimedPose { timestamp: i as f64, pose: looking(Vec3::new(i as f64, 1.0, 1.0), Vec3::x()) })
            .collect();
        assert_eq!(perturb_poses(&poses, 0.0, &mut sub_rng(1, 1)).unwrap(), poses);
    }

    #[test]
    fn perturbation_std_matches_sigma() {
        let base = looking(Vec3::new(1.0, 2.0, 3.0), Vec3::y());
        let poses = vec![TimedPose { timestamp: 0.0, pose: base }; 1000];
        let noisy = perturb_poses(&poses, 0.2, &mut sub_rng(2, 1)).unwrap();
        let mut sq = 0.0;
        for p in &noisy {
            assert_eq!(p.pose.rotation(), base.rotation());
            sq += (p.pose.translation() - base.translation()).norm_squared();
        }
        let std = (sq / (3.0 * noisy.len() as f64)).sqrt();
        assert!((std - 0.2).abs() < 0.02, "std {std}");
    }
}
