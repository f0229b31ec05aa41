//! Shared fixtures for the simulation-driven integration tests.
#![allow(dead_code)]

use std::collections::HashMap;

use surfloc::database::{DatabaseConfig, FrameReport, MapPointId, VisualDatabase};
use surfloc::descriptor::{GlobalBackend, LocalFeatures};
use surfloc::geometry::TimedPose;
use surfloc::pipeline::{build_database, DEFAULT_VOCABULARY_SIZE};
use surfloc::simulator::{simulate, Experiment, SimFrame, SimulatedRun};

pub struct Built {
    pub run: SimulatedRun,
    pub db: VisualDatabase,
    pub reports: Vec<FrameReport>,
}

pub fn frames(run: &SimulatedRun) -> Vec<LocalFeatures> {
    run.database.iter().map(|f| f.features.clone()).collect()
}

pub fn build(exp: &Experiment, config: DatabaseConfig) -> Built {
    let run = simulate(exp).unwrap();
    let (db, reports) =
        build_database(run.camera, &run.scene.map, &frames(&run), &run.database_poses, DEFAULT_VOCABULARY_SIZE, GlobalBackend::Vlad, config, exp.seed)
            .unwrap();
    Built { run, db, reports }
}

/// Database frames keyed by timestamp bits.
pub fn by_timestamp(frames: &[SimFrame]) -> HashMap<u64, &SimFrame> {
    frames.iter().map(|f| (f.timestamp.to_bits(), f)).collect()
}

/// Ground-truth landmark behind the anchor observation of a map point.
pub fn point_landmark(db: &VisualDatabase, frames: &HashMap<u64, &SimFrame>, pid: MapPointId) -> Option<u32> {
    let (kf, idx) = db.map_point(pid)?.anchor()?;
    let ts = db.keyframe(kf)?.timestamp;
    frames.get(&ts.to_bits())?.landmarks[idx as usize]
}

pub fn truth_of(poses: &[TimedPose], timestamp: f64) -> &TimedPose {
    poses.iter().find(|p| p.timestamp.to_bits() == timestamp.to_bits()).expect("timestamp present")
}

/// Root-mean-square keyframe position error against the true poses.
pub fn position_rmse(db: &VisualDatabase, truth: &[TimedPose]) -> f64 {
    let kfs = db.keyframes();
    let sum: f64 = kfs.values().map(|k| k.pose.translation_distance(&truth_of(truth, k.timestamp).pose).powi(2)).sum();
    (sum / kfs.len() as f64).sqrt()
}
