//! `OBSV` observation files and `GTRU` ground-truth sidecars.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::observe::SimFrame;
use super::scene::Scene;
use super::SimError;
use crate::binio::{
    expect_eof, read_descriptor, read_header, read_len, read_pixel, read_pose, read_vec3, write_descriptor, write_header, write_pixel,
    write_pose, write_vec3, FormatError,
};
use crate::descriptor::{Keypoint, LocalFeatures};
use crate::geometry::{PinholeCamera, Pose, Vec3};

const OBSV_MAGIC: &[u8; 4] = b"OBSV";
const GTRU_MAGIC: &[u8; 4] = b"GTRU";
const VERSION: u32 = 1;
const NO_LANDMARK: u32 = u32::MAX;

/// Camera plus timestamped local features, one entry per image.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationFile {
    pub camera: PinholeCamera,
    pub frames: Vec<(f64, LocalFeatures)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruthFrame {
    pub timestamp: f64,
    pub pose: Pose,
    /// Landmark behind each keypoint, `None` for outliers.
    pub landmarks: Vec<Option<u32>>,
    pub place: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// Landmark positions and generating plane index.
    pub landmarks: Vec<(Vec3, u32)>,
    /// Planes as `(n, d)` with `n·x + d = 0`.
    pub planes: Vec<(Vec3, f64)>,
    /// Generating plane of each surfel.
    pub surfel_planes: Vec<u32>,
    pub frames: Vec<GroundTruthFrame>,
}

fn write_camera<W: Write>(w: &mut W, c: &PinholeCamera) -> std::io::Result<()> {
    for v in [c.fx, c.fy, c.cx, c.cy] {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.write_u32::<LittleEndian>(c.width)?;
    w.write_u32::<LittleEndian>(c.height)
}

fn read_camera<R: Read>(r: &mut R) -> Result<PinholeCamera, FormatError> {
    let mut v = [0.0; 4];
    for x in v.iter_mut() {
        *x = r.read_f64::<LittleEndian>()?;
    }
    let (w, h) = (r.read_u32::<LittleEndian>()?, r.read_u32::<LittleEndian>()?);
    PinholeCamera::new(v[0], v[1], v[2], v[3], w, h).map_err(|e| FormatError::corrupt(e.to_string()))
}

impl ObservationFile {
    pub fn from_frames(camera: PinholeCamera, frames: &[SimFrame]) -> Self {
        Self { camera, frames: frames.iter().map(|f| (f.timestamp, f.features.clone())).collect() }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_header(w, OBSV_MAGIC, VERSION)?;
        write_camera(w, &self.camera)?;
        w.write_u64::<LittleEndian>(self.frames.len() as u64)?;
        for (ts, f) in &self.frames {
            w.write_f64::<LittleEndian>(*ts)?;
            w.write_u64::<LittleEndian>(f.len() as u64)?;
            for (kp, d) in f.keypoints().iter().zip(f.descriptors()) {
                write_pixel(w, &kp.position)?;
                w.write_f64::<LittleEndian>(kp.size)?;
                w.write_u8(kp.octave)?;
                write_descriptor(w, d)?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        read_header(r, OBSV_MAGIC, "OBSV", VERSION)?;
        let camera = read_camera(r)?;
        let n = read_len(r, None, 16)?;
        let mut frames = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let ts = r.read_f64::<LittleEndian>()?;
            let m = read_len(r, None, 57)?;
            let mut kps = Vec::with_capacity(m.min(1 << 16));
            let mut descs = Vec::with_capacity(m.min(1 << 16));
            for _ in 0..m {
                let position = read_pixel(r)?;
                let size = r.read_f64::<LittleEndian>()?;
                let octave = r.read_u8()?;
                if !(position.is_finite() && size > 0.0) {
                    return Err(FormatError::corrupt("invalid keypoint"));
                }
                kps.push(Keypoint { position, size, octave });
                descs.push(read_descriptor(r)?);
            }
            frames.push((ts, LocalFeatures::new(kps, descs).map_err(|e| FormatError::corrupt(e.to_string()))?));
        }
        expect_eof(r)?;
        Ok(Self { camera, frames })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Ok(Self::read_from(&mut BufReader::new(File::open(path)?))?)
    }
}

impl GroundTruth {
    pub fn new(scene: &Scene, frames: &[SimFrame]) -> Self {
        Self {
            landmarks: scene.landmarks.iter().map(|l| (l.position, l.plane)).collect(),
            planes: scene.planes.iter().map(|p| (p.normal, p.offset())).collect(),
            surfel_planes: scene.surfel_planes.clone(),
            frames: frames
                .iter()
                .map(|f| GroundTruthFrame { timestamp: f.timestamp, pose: f.pose, landmarks: f.landmarks.clone(), place: f.place })
                .collect(),
        }
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write_header(w, GTRU_MAGIC, VERSION)?;
        w.write_u64::<LittleEndian>(self.planes.len() as u64)?;
        for (n, d) in &self.planes {
            write_vec3(w, n)?;
            w.write_f64::<LittleEndian>(*d)?;
        }
        w.write_u64::<LittleEndian>(self.landmarks.len() as u64)?;
        for (x, p) in &self.landmarks {
            write_vec3(w, x)?;
            w.write_u32::<LittleEndian>(*p)?;
        }
        w.write_u64::<LittleEndian>(self.surfel_planes.len() as u64)?;
        for p in &self.surfel_planes {
            w.write_u32::<LittleEndian>(*p)?;
        }
        w.write_u64::<LittleEndian>(self.frames.len() as u64)?;
        for f in &self.frames {
            w.write_f64::<LittleEndian>(f.timestamp)?;
            write_pose(w, &f.pose)?;
            w.write_u32::<LittleEndian>(f.place)?;
            w.write_u64::<LittleEndian>(f.landmarks.len() as u64)?;
            for l in &f.landmarks {
                w.write_u32::<LittleEndian>(l.unwrap_or(NO_LANDMARK))?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, FormatError> {
        read_header(r, GTRU_MAGIC, "GTRU", VERSION)?;
        let n = read_len(r, None, 32)?;
        let mut planes = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            planes.push((read_vec3(r)?, r.read_f64::<LittleEndian>()?));
        }
        let n = read_len(r, None, 28)?;
        let mut landmarks = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let x = read_vec3(r)?;
            let p = r.read_u32::<LittleEndian>()?;
            if p as usize >= planes.len() {
                return Err(FormatError::corrupt("landmark plane out of range"));
            }
            landmarks.push((x, p));
        }
        let n = read_len(r, None, 4)?;
        let mut surfel_planes = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            surfel_planes.push(r.read_u32::<LittleEndian>()?);
        }
        let n = read_len(r, None, 76)?;
        let mut frames = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let timestamp = r.read_f64::<LittleEndian>()?;
            let pose = read_pose(r)?;
            let place = r.read_u32::<LittleEndian>()?;
            let m = read_len(r, None, 4)?;
            let mut ids = Vec::with_capacity(m.min(1 << 16));
            for _ in 0..m {
                let id = r.read_u32::<LittleEndian>()?;
                if id != NO_LANDMARK && id as usize >= landmarks.len() {
                    return Err(FormatError::corrupt("observation landmark out of range"));
                }
                ids.push((id != NO_LANDMARK).then_some(id));
            }
            frames.push(GroundTruthFrame { timestamp, pose, landmarks: ids, place });
        }
        expect_eof(r)?;
        Ok(Self { landmarks, planes, surfel_planes, frames })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        Ok(Self::read_from(&mut BufReader::new(File::open(path)?))?)
    }

    /// Ground-truth frame with exactly this timestamp.
    pub fn frame_at(&self, timestamp: f64) -> Option<&GroundTruthFrame> {
        self.frames.iter().find(|f| f.timestamp == timestamp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, Preset};

    #[test]
    fn observation_and_truth_files_round_trip() {
        let mut exp = Preset::Room.experiment(11);
        exp.database_loops = 1;
        exp.scene.surfel_radius = 0.1;
        let run = simulate(&exp).unwrap();
        let obs = ObservationFile::from_frames(run.camera, &run.database[..3]);
        let mut bytes = Vec::new();
        obs.write_to(&mut bytes).unwrap();
        assert_eq!(ObservationFile::read_from(&mut bytes.as_slice()).unwrap(), obs);
        assert!(ObservationFile::read_from(&mut &bytes[..bytes.len() - 1]).is_err());

        let gt = GroundTruth::new(&run.scene, &run.database[..3]);
        let mut bytes = Vec::new();
        gt.write_to(&mut bytes).unwrap();
        assert_eq!(GroundTruth::read_from(&mut bytes.as_slice()).unwrap(), gt);
        bytes.push(0);
        assert!(GroundTruth::read_from(&mut bytes.as_slice()).is_err());
    }
}
