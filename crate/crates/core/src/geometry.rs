//! Rigid transforms, the pinhole camera and trajectory text I/O.
//!
//! Poses are stored as `world_from_frame`: applying a pose to a point expressed
//! in the frame yields the point in the world. Optimizers perturb poses on the
//! right, `T * exp(delta)`, with the tangent ordered as `(translation, rotation)`.

use std::fmt;
use std::io::{BufRead, Write};

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3, Vector6};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;
pub type Tangent = Vector6<f64>;

/// Skew-symmetric cross-product matrix, `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vec3) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

fn so3_exp(omega: &Vec3) -> UnitQuaternion<f64> {
    let theta = omega.norm();
    let half = 0.5 * theta;
    let (w, k) = if theta < 1e-8 {
        // sin(x/2)/x ~ 1/2 - x^2/48
        (1.0 - theta * theta / 8.0, 0.5 - theta * theta / 48.0)
    } else {
        (half.cos(), half.sin() / theta)
    };
    UnitQuaternion::new_normalize(Quaternion::new(w, k * omega.x, k * omega.y, k * omega.z))
}

fn so3_log(q: &UnitQuaternion<f64>) -> Vec3 {
    let q = q.quaternion();
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let n = v.norm();
    if n < 1e-10 {
        // 2 atan(n/w)/n ~ 2/w (1 - n^2/(3w^2))
        v * (2.0 / w) * (1.0 - n * n / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

/// Coefficients `a = (1 - cos t)/t^2`, `b = (t - sin t)/t^3` of the SE(3) left Jacobian.
fn left_jacobian_coeffs(theta: f64) -> (f64, f64) {
    let t2 = theta * theta;
    if theta < 1e-4 {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        ((1.0 - theta.cos()) / t2, (theta - theta.sin()) / (t2 * theta))
    }
}

/// Rigid transform `world_from_frame`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation,
        }
    }

    /// Builds a pose from raw quaternion components `(qx, qy, qz, qw)`; the
    /// quaternion is normalized.
    pub fn from_components(t: [f64; 3], q: [f64; 4]) -> Option<Self> {
        let quat = Quaternion::new(q[3], q[0], q[1], q[2]);
        let norm = quat.norm();
        if !norm.is_finite() || norm < 1e-12 || t.iter().any(|c| !c.is_finite()) {
            return None;
        }
        // Already-unit input is kept bit-exact so text round trips are stable.
        let rotation = if (norm - 1.0).abs() > 1e-12 {
            UnitQuaternion::new_normalize(quat)
        } else {
            UnitQuaternion::new_unchecked(quat)
        };
        Some(Self {
            rotation,
            translation: Vec3::new(t[0], t[1], t[2]),
        })
    }

    pub fn from_rotation_matrix(rotation: &Matrix3<f64>, translation: Vec3) -> Self {
        let rot = nalgebra::Rotation3::from_matrix_unchecked(*rotation);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// `self * other`.
    pub fn compose(&self, other: &Pose) -> Pose {
        let rotation = self.rotation * other.rotation;
        Pose {
            rotation: UnitQuaternion::new_normalize(rotation.into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Maps a world point into this frame.
    pub fn inverse_transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn exp(tangent: &Tangent) -> Pose {
        let v = Vec3::new(tangent[0], tangent[1], tangent[2]);
        let omega = Vec3::new(tangent[3], tangent[4], tangent[5]);
        let (a, b) = left_jacobian_coeffs(omega.norm());
        let w = hat(&omega);
        let jl = Matrix3::identity() + w * a + w * w * b;
        Pose {
            rotation: so3_exp(&omega),
            translation: jl * v,
        }
    }

    pub fn log(&self) -> Tangent {
        let omega = so3_log(&self.rotation);
        let theta = omega.norm();
        let w = hat(&omega);
        let c = if theta < 1e-4 {
            let t2 = theta * theta;
            1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
        } else {
            (1.0 - theta * theta.sin() / (2.0 * (1.0 - theta.cos()))) / (theta * theta)
        };
        let jl_inv = Matrix3::identity() - w * 0.5 + w * w * c;
        let v = jl_inv * self.translation;
        Tangent::new(v.x, v.y, v.z, omega.x, omega.y, omega.z)
    }

    /// Right perturbation `self * exp(delta)`.
    pub fn retract(&self, delta: &Tangent) -> Pose {
        self.compose(&Pose::exp(delta))
    }

    pub fn translation_distance(&self, other: &Pose) -> f64 {
        (self.translation - other.translation).norm()
    }

    pub fn rotation_angle_to(&self, other: &Pose) -> f64 {
        self.rotation.angle_to(&other.rotation)
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|c| c.is_finite())
            && self.rotation.coords.iter().all(|c| c.is_finite())
    }
}

/// Sub-pixel image coordinate. Integer coordinates are pixel centers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn distance(&self, other: &Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }

    pub fn is_finite(&self) -> bool {
        self.u.is_finite() && self.v.is_finite()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("focal lengths must be positive (fx={fx}, fy={fy})")]
    NonPositiveFocal { fx: f64, fy: f64 },
    #[error("principal point ({cx}, {cy}) outside {width}x{height} image")]
    PrincipalPointOutside { cx: f64, cy: f64, width: u32, height: u32 },
}

/// Distortion-free pinhole camera.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl PinholeCamera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0) {
            return Err(CameraError::NonPositiveFocal { fx, fy });
        }
        if !(cx >= 0.0 && cx < width as f64 && cy >= 0.0 && cy < height as f64) {
            return Err(CameraError::PrincipalPointOutside { cx, cy, width, height });
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Projects a camera-frame point; `None` for non-positive depth.
    pub fn project(&self, x: &Vec3) -> Option<Pixel> {
        if !(x.z > 0.0) {
            return None;
        }
        Some(Pixel {
            u: self.fx * x.x / x.z + self.cx,
            v: self.fy * x.y / x.z + self.cy,
        })
    }

    /// Projection together with its 2x3 Jacobian with respect to the point.
    pub fn project_with_jacobian(&self, x: &Vec3) -> Option<(Pixel, Matrix2x3<f64>)> {
        let p = self.project(x)?;
        let iz = 1.0 / x.z;
        let iz2 = iz * iz;
        let j = Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * x.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * x.y * iz2,
        );
        Some((p, j))
    }

    /// Back-projects a pixel at inverse depth `rho`; `None` unless `rho > 0`.
    pub fn unproject(&self, p: &Pixel, rho: f64) -> Option<Vec3> {
        if !(rho > 0.0) {
            return None;
        }
        Some(self.lift_unit_plane(p) / rho)
    }

    /// Lifts a pixel onto the `z = 1` plane.
    pub fn lift_unit_plane(&self, p: &Pixel) -> Vec3 {
        Vec3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// True when the pixel rounds to a pixel inside the image.
    pub fn contains(&self, p: &Pixel) -> bool {
        self.pixel_index(p).is_some()
    }

    /// Integer pixel the coordinate rounds to, if inside the image.
    pub fn pixel_index(&self, p: &Pixel) -> Option<(u32, u32)> {
        if !p.is_finite() {
            return None;
        }
        let (x, y) = (p.u.round(), p.v.round());
        if x < 0.0 || y < 0.0 || x >= self.width as f64 || y >= self.height as f64 {
            return None;
        }
        Some((x as u32, y as u32))
    }

    pub fn mean_focal(&self) -> f64 {
        0.5 * (self.fx + self.fy)
    }
}

/// Pose tagged with a timestamp (seconds).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Reads `timestamp tx ty tz qx qy qz qw` records; `#` starts a comment.
pub fn read_trajectory<R: BufRead>(reader: R) -> Result<Vec<TimedPose>, TrajectoryError> {
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let content = line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let fields: Vec<&str> = content.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(TrajectoryError::Parse {
                line: idx + 1,
                message: format!("expected 8 fields, found {}", fields.len()),
            });
        }
        let mut vals = [0.0; 8];
        for (slot, field) in vals.iter_mut().zip(&fields) {
            *slot = field.parse::<f64>().map_err(|e| TrajectoryError::Parse {
                line: idx + 1,
                message: format!("bad number {field:?}: {e}"),
            })?;
        }
        let pose = Pose::from_components([vals[1], vals[2], vals[3]], [vals[4], vals[5], vals[6], vals[7]])
            .ok_or_else(|| TrajectoryError::Parse {
                line: idx + 1,
                message: "degenerate quaternion or non-finite translation".into(),
            })?;
        poses.push(TimedPose { timestamp: vals[0], pose });
    }
    Ok(poses)
}

/// Writes poses in the format read by [`read_trajectory`]. Values use the
/// shortest representation that round-trips exactly.
pub fn write_trajectory<W: Write>(mut writer: W, poses: &[TimedPose]) -> std::io::Result<()> {
    writeln!(writer, "# timestamp tx ty tz qx qy qz qw")?;
    for tp in poses {
        writeln!(writer, "{}", PoseRecord(tp))?;
    }
    Ok(())
}

struct PoseRecord<'a>(&'a TimedPose);

impl fmt::Display for PoseRecord<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = self.0.pose.translation();
        let q = self.0.pose.rotation().quaternion();
        write!(
            f,
            "{} {} {} {} {} {} {} {}",
            self.0.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
        )
    }
}

/// Rotation whose camera axes look along `forward` with `up` roughly opposite
/// to the image y axis (x right, y down, z forward).
pub fn look_rotation(forward: &Vec3, up: &Vec3) -> Option<Matrix3<f64>> {
    let f = forward.try_normalize(1e-12)?;
    let right = f.cross(up).try_normalize(1e-9)?;
    let down = f.cross(&right);
    Some(Matrix3::from_columns(&[right, down, f]))
}
