//! Synthetic worlds with exact ground truth: planar scenes tessellated into
//! surfels, descriptor-carrying landmarks, camera trajectories and noisy
//! observations.

mod io;
mod observe;
mod presets;
mod scene;
mod trajectory;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::binio::FormatError;

pub use io::{GroundTruth, GroundTruthFrame, ObservationFile};
pub use observe::{depth_octave, observe, perturb_poses, visible_landmarks, NoiseSpec, SensorSpec, SimFrame};
pub use presets::{aliasing, default_camera, degraded, simulate, two_lane, Experiment, PlaceLabeling, Preset, SimulatedRun, QUERY_T0};
pub use scene::{flip_bits, generate_scene, Landmark, PlaneRect, Scene, SceneKind, SceneSpec};
pub use trajectory::{check_inside, generate_trajectory, TrajectorySpec};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid simulation spec: {0}")]
    InvalidSpec(String),
    #[error("trajectory frame {frame} leaves the scene")]
    OutsideScene { frame: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Independent generator for one purpose (`stream`) under a run seed.
pub fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
