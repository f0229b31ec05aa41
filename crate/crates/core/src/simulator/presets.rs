use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use super::observe::{observe, perturb_poses, NoiseSpec, SensorSpec, SimFrame};
use super::scene::{generate_scene, Scene, SceneKind, SceneSpec};
use super::trajectory::{check_inside, generate_trajectory, TrajectorySpec};
use super::{sub_rng, SimError};
use crate::geometry::{PinholeCamera, Pose, TimedPose, Vec3};

const DB_OBSERVATION_STREAM: u64 = 1 << 32;
const QUERY_OBSERVATION_STREAM: u64 = 2 << 32;
const POSE_NOISE_STREAM: u64 = 3;
/// First query timestamp; database frames start at zero.
pub const QUERY_T0: f64 = 10_000.0;
const FRAME_RATE: f64 = 10.0;
const POSE_MARGIN: f64 = 0.2;
const ROOM_PITCH: f64 = 0.35;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Preset {
    Room,
    Corridor,
    TwoLane,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Room => "room",
            Preset::Corridor => "corridor",
            Preset::TwoLane => "two-lane",
        })
    }
}

impl FromStr for Preset {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, SimError> {
        match s {
            "room" => Ok(Preset::Room),
            "corridor" => Ok(Preset::Corridor),
            "two-lane" => Ok(Preset::TwoLane),
            other => Err(SimError::InvalidSpec(format!("unknown preset {other:?}"))),
        }
    }
}

/// How frames are grouped into places for retrieval ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PlaceLabeling {
    /// Yaw of the optical axis split into equal sectors.
    Heading { sectors: u32 },
    /// Position along x split into segments of the given length.
    AlongX { segment: f64 },
}

impl PlaceLabeling {
    pub fn label(&self, pose: &Pose) -> u32 {
        match *self {
            PlaceLabeling::Heading { sectors } => {
                let axis = pose.rotation() * Vec3::z();
                let yaw = axis.y.atan2(axis.x).rem_euclid(TAU);
                ((yaw / TAU * sectors as f64) as u32).min(sectors - 1)
            }
            PlaceLabeling::AlongX { segment } => (pose.translation().x / segment).floor().max(0.0) as u32,
        }
    }
}

/// Everything needed to regenerate one simulated data set.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub preset: Preset,
    pub seed: u64,
    pub scene: SceneSpec,
    pub camera: PinholeCamera,
    /// One pass of the mapping trajectory.
    pub database: TrajectorySpec,
    /// Number of passes over the mapping trajectory.
    pub database_loops: usize,
    /// The mapping passes are replayed in this many scene copies, shifted by
    /// the copy offset.
    pub database_copies: u32,
    pub query: TrajectorySpec,
    pub noise: NoiseSpec,
    pub sensor: SensorSpec,
    pub labeling: PlaceLabeling,
}

pub fn default_camera() -> PinholeCamera {
    PinholeCamera::new(400.0, 400.0, 376.0, 240.0, 752, 480).expect("valid camera")
}

impl Preset {
    pub fn experiment(self, seed: u64) -> Experiment {
        match self {
            Preset::Room => {
                let center = Vec3::new(3.0, 2.5, 1.5);
                let pitch = ROOM_PITCH;
                Experiment {
                    preset: self,
                    seed,
                    scene: SceneSpec::new(SceneKind::Room { size: Vec3::new(6.0, 5.0, 3.0) }, 0.02, 20.0, seed),
                    camera: default_camera(),
                    database: TrajectorySpec::Circle { center, radius: 1.0, frames_per_loop: 36, loops: 1, phase: 0.0, pitch },
                    database_loops: 1,
                    database_copies: 1,
                    query: TrajectorySpec::Circle {
                        center: Vec3::new(3.0, 2.5, 1.4),
                        radius: 1.2,
                        frames_per_loop: 36,
                        loops: 1,
                        phase: 5f64.to_radians(),
                        pitch,
                    },
                    noise: NoiseSpec::default(),
                    sensor: SensorSpec::default(),
                    labeling: PlaceLabeling::Heading { sectors: 12 },
                }
            }
            Preset::Corridor => Experiment {
                preset: self,
                seed,
                scene: SceneSpec::new(SceneKind::Corridor { length: 20.0, width: 2.5, height: 3.0 }, 0.05, 20.0, seed),
                camera: default_camera(),
                database: TrajectorySpec::Line {
                    start: Vec3::new(1.0, 1.25, 1.5),
                    end: Vec3::new(19.0, 1.25, 1.5),
                    frames: 37,
                    forward: Vec3::x(),
                    pitch: 0.0,
                },
                database_loops: 1,
                    database_copies: 1,
                query: TrajectorySpec::Line {
                    start: Vec3::new(1.25, 1.0, 1.4),
                    end: Vec3::new(18.75, 1.0, 1.4),
                    frames: 36,
                    forward: Vec3::x(),
                    pitch: 0.0,
                },
                noise: NoiseSpec::default(),
                sensor: SensorSpec::default(),
                labeling: PlaceLabeling::AlongX { segment: 2.0 },
            },
            Preset::TwoLane => two_lane(seed, 3.5),
        }
    }
}

/// Street scene with the query lane `lane_width` to the side of the mapping lane.
pub fn two_lane(seed: u64, lane_width: f64) -> Experiment {
    let db_y = 2.25;
    let pitch = 0.1;
    Experiment {
        preset: Preset::TwoLane,
        seed,
        scene: SceneSpec::new(SceneKind::TwoLane { length: 60.0, width: 8.0, facade_height: 6.0 }, 0.1, 5.0, seed),
        camera: default_camera(),
        database: TrajectorySpec::Line {
            start: Vec3::new(2.0, db_y, 1.5),
            end: Vec3::new(58.0, db_y, 1.5),
            frames: 57,
            forward: Vec3::x(),
            pitch,
        },
        database_loops: 1,
        database_copies: 1,
        query: TrajectorySpec::Line {
            start: Vec3::new(2.5, db_y + lane_width, 1.5),
            end: Vec3::new(57.5, db_y + lane_width, 1.5),
            frames: 56,
            forward: Vec3::x(),
            pitch,
        },
        noise: NoiseSpec::default(),
        sensor: SensorSpec { max_range: 30.0, ..SensorSpec::default() },
        labeling: PlaceLabeling::AlongX { segment: 5.0 },
    }
}

/// Room duplicated side by side, both copies mapped, queries in the first
/// copy only. Copied landmarks differ by `descriptor_flips` bits.
pub fn aliasing(seed: u64, descriptor_flips: u32) -> Experiment {
    let mut exp = Preset::Room.experiment(seed);
    exp.scene.copies = 2;
    exp.scene.copy_descriptor_flips = descriptor_flips;
    exp.database_copies = 2;
    exp
}

/// Room with noisy, sparse observations: 12 of 256 descriptor bits flipped,
/// 1 px pixel noise, half the landmarks dropped per frame, and queries on a
/// wider circle than the mapping pass.
pub fn degraded(seed: u64) -> Experiment {
    let mut exp = Preset::Room.experiment(seed);
    exp.noise = NoiseSpec { descriptor_flips: 12, pixel_sigma: 1.0, dropout: 0.5, ..NoiseSpec::default() };
    if let TrajectorySpec::Circle { frames_per_loop, .. } = &mut exp.database {
        *frames_per_loop = 72;
    }
    if let TrajectorySpec::Circle { radius, frames_per_loop, .. } = &mut exp.query {
        *radius = 1.8;
        *frames_per_loop = 72;
    }
    exp
}

/// Generated data: scene, exact and perturbed mapping poses, and both image sequences.
#[derive(Clone, Debug)]
pub struct SimulatedRun {
    pub scene: Scene,
    pub camera: PinholeCamera,
    pub database: Vec<SimFrame>,
    /// Mapping poses after position noise, as handed to the database builder.
    pub database_poses: Vec<TimedPose>,
    pub query: Vec<SimFrame>,
}

impl SimulatedRun {
    pub fn database_truth(&self) -> Vec<TimedPose> {
        self.database.iter().map(|f| TimedPose { timestamp: f.timestamp, pose: f.pose }).collect()
    }

    pub fn query_truth(&self) -> Vec<TimedPose> {
        self.query.iter().map(|f| TimedPose { timestamp: f.timestamp, pose: f.pose }).collect()
    }
}

fn frames(exp: &Experiment, scene: &Scene, poses: &[TimedPose], stream: u64) -> Result<Vec<SimFrame>, SimError> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut rng = sub_rng(exp.seed, stream + i as u64);
            let (features, landmarks) = observe(scene, &p.pose, &exp.camera, &exp.noise, &exp.sensor, &mut rng)?;
            Ok(SimFrame { timestamp: p.timestamp, pose: p.pose, features, landmarks, place: exp.labeling.label(&p.pose) })
        })
        .collect()
}

/// Runs the experiment. Deterministic per `exp.seed` and `exp.scene.seed`.
pub fn simulate(exp: &Experiment) -> Result<SimulatedRun, SimError> {
    exp.noise.validate()?;
    if exp.database_loops == 0 || exp.database_copies == 0 || exp.database_copies > exp.scene.copies {
        return Err(SimError::InvalidSpec("database loops and copies must be positive and copies must exist".into()));
    }
    let scene = generate_scene(&exp.scene)?;
    let one_loop = generate_trajectory(&exp.database, 0.0, FRAME_RATE)?;
    let mut passes = Vec::new();
    for c in 0..exp.database_copies {
        let shift = Vec3::new(exp.scene.copy_offset(c), 0.0, 0.0);
        for _ in 0..exp.database_loops {
            passes.extend(one_loop.iter().map(|p| Pose::new(*p.pose.rotation(), p.pose.translation() + shift)));
        }
    }
    let db_poses: Vec<TimedPose> = passes
        .into_iter()
        .enumerate()
        .map(|(i, pose)| TimedPose { timestamp: i as f64 / FRAME_RATE, pose })
        .collect();
    let query_poses = generate_trajectory(&exp.query, QUERY_T0, FRAME_RATE)?;
    check_inside(&scene, &db_poses, POSE_MARGIN)?;
    check_inside(&scene, &query_poses, POSE_MARGIN)?;

    let database = frames(exp, &scene, &db_poses, DB_OBSERVATION_STREAM)?;
    let query = frames(exp, &scene, &query_poses, QUERY_OBSERVATION_STREAM)?;
    let database_poses = perturb_poses(&db_poses, exp.noise.pose_sigma, &mut sub_rng(exp.seed, POSE_NOISE_STREAM))?;
    Ok(SimulatedRun { scene, camera: exp.camera, database, database_poses, query })
}
