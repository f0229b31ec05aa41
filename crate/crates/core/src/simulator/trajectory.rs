use std::f64::consts::TAU;

use nalgebra::{Rotation3, UnitQuaternion};

use super::{Scene, SimError};
use crate::geometry::{look_rotation, Pose, TimedPose, Vec3};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TrajectorySpec {
    /// Horizontal circle looking outward, `frames_per_loop` poses per turn.
    Circle {
        center: Vec3,
        radius: f64,
        frames_per_loop: usize,
        loops: usize,
        /// Angle of the first pose (rad).
        phase: f64,
        /// Downward tilt of the optical axis (rad).
        pitch: f64,
    },
    /// Back-and-forth rows along x over `[min, max]` at fixed height,
    /// looking along the direction of travel.
    Lawnmower { min: [f64; 2], max: [f64; 2], height: f64, row_spacing: f64, step: f64, pitch: f64 },
    /// Straight segment traversed at constant speed, looking along `forward`.
    Line { start: Vec3, end: Vec3, frames: usize, forward: Vec3, pitch: f64 },
}

fn oriented(position: Vec3, forward: Vec3, pitch: f64) -> Result<Pose, SimError> {
    let flat = Vec3::new(forward.x, forward.y, 0.0);
    let flat = if flat.norm() > 1e-12 { flat.normalize() } else { return Err(SimError::InvalidSpec("forward direction is vertical".into())) };
    let f = flat * pitch.cos() - Vec3::z() * pitch.sin();
    let r = look_rotation(&f, &Vec3::z()).ok_or_else(|| SimError::InvalidSpec("degenerate look direction".into()))?;
    Ok(Pose::new(UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)), position))
}

/// Poses sampled at `rate` Hz starting at `t0`.
pub fn generate_trajectory(spec: &TrajectorySpec, t0: f64, rate: f64) -> Result<Vec<TimedPose>, SimError> {
    let mut poses = Vec::new();
    match *spec {
        TrajectorySpec::Circle { center, radius, frames_per_loop, loops, phase, pitch } => {
            if frames_per_loop == 0 || !(radius >= 0.0) {
                return Err(SimError::InvalidSpec("circle needs frames and a non-negative radius".into()));
            }
            for i in 0..frames_per_loop * loops {
                let a = phase + TAU * i as f64 / frames_per_loop as f64;
                let dir = Vec3::new(a.cos(), a.sin(), 0.0);
                poses.push(oriented(center + dir * radius, dir, pitch)?);
            }
        }
        TrajectorySpec::Lawnmower { min, max, height, row_spacing, step, pitch } => {
            if !(row_spacing > 0.0 && step > 0.0 && max[0] > min[0] && max[1] >= min[1]) {
                return Err(SimError::InvalidSpec("lawnmower needs positive spacing, step and extent".into()));
            }
            let rows = ((max[1] - min[1]) / row_spacing).floor() as usize + 1;
            let cols = ((max[0] - min[0]) / step).ceil() as usize;
            for r in 0..rows {
                let y = min[1] + r as f64 * row_spacing;
                let forward = if r % 2 == 0 { Vec3::x() } else { -Vec3::x() };
                for c in 0..=cols {
                    let s = (c as f64 * step).min(max[0] - min[0]);
                    let x = if r % 2 == 0 { min[0] + s } else { max[0] - s };
                    poses.push(oriented(Vec3::new(x, y, height), forward, pitch)?);
                }
            }
        }
        TrajectorySpec::Line { start, end, frames, forward, pitch } => {
            if frames == 0 {
                return Err(SimError::InvalidSpec("line needs at least one frame".into()));
            }
            for i in 0..frames {
                let s = if frames == 1 { 0.0 } else { i as f64 / (frames - 1) as f64 };
                poses.push(oriented(start + (end - start) * s, forward, pitch)?);
            }
        }
    }
    Ok(poses
        .into_iter()
        .enumerate()
        .map(|(i, pose)| TimedPose { timestamp: t0 + i as f64 / rate, pose })
        .collect())
}

/// Fails if any pose leaves the free space of the scene.
pub fn check_inside(scene: &Scene, poses: &[TimedPose], margin: f64) -> Result<(), SimError> {
    match poses.iter().position(|p| !scene.contains(p.pose.translation(), margin)) {
        Some(i) => Err(SimError::OutsideScene { frame: i }),
        None => Ok(()),
    }
}
