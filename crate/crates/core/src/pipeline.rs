//! Glue between the simulator outputs, the database builder and the
//! relocalizer.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::database::{DatabaseConfig, DatabaseError, FrameReport, VisualDatabase};
use crate::descriptor::{train_vocabulary, Descriptor, DescriptorError, GlobalBackend, LocalFeatures, Vocabulary};
use crate::geometry::{PinholeCamera, TimedPose};
use crate::surfel_map::SurfelMap;

pub const DEFAULT_VOCABULARY_SIZE: usize = 64;
/// Upper bound on descriptors fed to vocabulary training.
pub const VOCABULARY_SAMPLE: usize = 20_000;

/// Trains a vocabulary on a seeded subsample of all descriptors.
pub fn train_from_frames<'a>(
    frames: impl IntoIterator<Item = &'a LocalFeatures>,
    size: usize,
    seed: u64,
) -> Result<Vocabulary, DescriptorError> {
    let all: Vec<Descriptor> = frames.into_iter().flat_map(|f| f.descriptors().iter().copied()).collect();
    let picked = if all.len() > VOCABULARY_SAMPLE {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, all.len(), VOCABULARY_SAMPLE).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| all[i]).collect()
    } else {
        all
    };
    Ok(train_vocabulary(&picked, size, seed)?.0)
}

/// Feeds frames into the database in order, invoking `on_report` after each.
pub fn insert_frames<'a>(
    db: &mut VisualDatabase,
    map: &SurfelMap,
    frames: impl IntoIterator<Item = (&'a LocalFeatures, &'a TimedPose)>,
    mut on_report: impl FnMut(&VisualDatabase, &FrameReport) -> Result<(), DatabaseError>,
) -> Result<(), DatabaseError> {
    for (local, pose) in frames {
        let features = db.describe(local.clone())?;
        let report = db.process_frame(pose.timestamp, features, pose.pose, map)?;
        on_report(db, &report)?;
    }
    Ok(())
}

/// Trains a vocabulary and builds a fresh database from one image sequence.
pub fn build_database(
    camera: PinholeCamera,
    map: &SurfelMap,
    frames: &[LocalFeatures],
    poses: &[TimedPose],
    vocabulary_size: usize,
    backend: GlobalBackend,
    config: DatabaseConfig,
    seed: u64,
) -> Result<(VisualDatabase, Vec<FrameReport>), DatabaseError> {
    if frames.len() != poses.len() {
        return Err(DatabaseError::Integrity(format!("{} frames but {} poses", frames.len(), poses.len())));
    }
    let vocab = train_from_frames(frames, vocabulary_size, seed)?;
    let mut db = VisualDatabase::new(camera, vocab, backend, config);
    let mut reports = Vec::with_capacity(frames.len());
    insert_frames(&mut db, map, frames.iter().zip(poses), |_, r| {
        reports.push(r.clone());
        Ok(())
    })?;
    Ok((db, reports))
}
