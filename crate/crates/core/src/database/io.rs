//! `VSDB` database file: header followed by tagged, length-prefixed sections.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::*;
use crate::binio::{self, FormatError};
use crate::descriptor::{Keypoint, MatchParams};

const MAGIC: &[u8; 4] = b"VSDB";
const VERSION: u32 = 1;
const NONE: u32 = u32::MAX;
const SECTIONS: [&[u8; 4]; 6] = [b"CONF", b"CAMR", b"VOCB", b"KFRM", b"MPTS", b"EDGE"];

fn opt_u32(v: Option<u32>) -> u32 {
    v.unwrap_or(NONE)
}

fn read_opt_u32(r: &mut &[u8]) -> Result<Option<u32>, FormatError> {
    let v = r.read_u32::<LittleEndian>()?;
    Ok((v != NONE).then_some(v))
}

/// Rejects element counts that could not fit in the remaining bytes.
fn count(r: &mut &[u8], min_item_bytes: usize) -> Result<usize, FormatError> {
    binio::read_len(r, Some(r.len() as u64), min_item_bytes as u64)
}

fn backend_tag(b: GlobalBackend) -> u8 {
    match b {
        GlobalBackend::Vlad => 0,
        GlobalBackend::BagOfWords => 1,
    }
}

impl VisualDatabase {
    fn section_payloads(&self) -> std::io::Result<Vec<Vec<u8>>> {
        let mut conf = Vec::new();
        let c = &self.config;
        conf.write_f64::<LittleEndian>(c.grid.window)?;
        conf.write_f64::<LittleEndian>(c.grid.descriptor.ratio)?;
        conf.write_u32::<LittleEndian>(c.grid.descriptor.max_distance)?;
        conf.write_f64::<LittleEndian>(c.duplicate_fraction)?;
        conf.write_u32::<LittleEndian>(c.duplicate_min_observers)?;
        conf.write_u64::<LittleEndian>(c.recent_point_window)?;
        conf.write_u8(backend_tag(self.backend))?;
        conf.write_u32::<LittleEndian>(self.next_keyframe)?;
        conf.write_u32::<LittleEndian>(self.next_map_point)?;
        conf.write_u64::<LittleEndian>(self.frames_processed)?;

        let mut cam = Vec::new();
        for v in [self.camera.fx, self.camera.fy, self.camera.cx, self.camera.cy] {
            cam.write_f64::<LittleEndian>(v)?;
        }
        cam.write_u32::<LittleEndian>(self.camera.width)?;
        cam.write_u32::<LittleEndian>(self.camera.height)?;

        let mut vocab = Vec::new();
        self.vocabulary.write_to(&mut vocab)?;

        let mut kfs = Vec::new();
        kfs.write_u64::<LittleEndian>(self.keyframes.len() as u64)?;
        for kf in self.keyframes.values() {
            kfs.write_u32::<LittleEndian>(kf.id.0)?;
            kfs.write_f64::<LittleEndian>(kf.timestamp)?;
            binio::write_pose(&mut kfs, &kf.pose)?;
            kfs.write_u64::<LittleEndian>(kf.links.len() as u64)?;
            for ((kp, d), link) in kf.features.keypoints().iter().zip(kf.features.descriptors()).zip(&kf.links) {
                binio::write_pixel(&mut kfs, &kp.position)?;
                kfs.write_f64::<LittleEndian>(kp.size)?;
                kfs.write_u8(kp.octave)?;
                binio::write_descriptor(&mut kfs, d)?;
                kfs.write_u32::<LittleEndian>(opt_u32(link.map_point.map(|p| p.0)))?;
                kfs.write_u32::<LittleEndian>(opt_u32(link.surfel.map(|s| s.0)))?;
                kfs.write_u64::<LittleEndian>(link.neighbors.len() as u64)?;
                for n in &link.neighbors {
                    kfs.write_u32::<LittleEndian>(n.0)?;
                }
            }
            let g = kf.features.global.as_slice();
            kfs.write_u64::<LittleEndian>(g.len() as u64)?;
            for v in g {
                kfs.write_f64::<LittleEndian>(*v)?;
            }
        }

        let mut pts = Vec::new();
        pts.write_u64::<LittleEndian>(self.map_points.len() as u64)?;
        for p in self.map_points.values() {
            pts.write_u32::<LittleEndian>(p.id.0)?;
            binio::write_vec3(&mut pts, &p.position)?;
            pts.write_u32::<LittleEndian>(p.surfel.0)?;
            binio::write_descriptor(&mut pts, &p.descriptor)?;
            pts.write_u32::<LittleEndian>(p.creation_frame.0)?;
            pts.write_u64::<LittleEndian>(p.creation_seq)?;
            pts.write_u8(p.reobserved as u8)?;
            pts.write_u64::<LittleEndian>(p.observations.len() as u64)?;
            for (kf, idx) in &p.observations {
                pts.write_u32::<LittleEndian>(kf.0)?;
                pts.write_u32::<LittleEndian>(*idx)?;
            }
        }

        let mut edges = Vec::new();
        let list = self.covisibility.edges();
        edges.write_u64::<LittleEndian>(list.len() as u64)?;
        for (a, b, w) in list {
            edges.write_u32::<LittleEndian>(a.0)?;
            edges.write_u32::<LittleEndian>(b.0)?;
            edges.write_u32::<LittleEndian>(w)?;
        }
        Ok(vec![conf, cam, vocab, kfs, pts, edges])
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        binio::write_header(w, MAGIC, VERSION)?;
        for (tag, payload) in SECTIONS.iter().zip(self.section_payloads()?) {
            w.write_all(*tag)?;
            w.write_u64::<LittleEndian>(payload.len() as u64)?;
            w.write_all(&payload)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    /// Writes atomically via a sibling temporary file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatabaseError> {
        let path = path.as_ref();
        let tmp = path.with_extension("vsdb.tmp");
        {
            let mut f = File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatabaseError> {
        let mut bytes = Vec::new();
        File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Parses a complete database image; nothing is returned unless every
    /// section parses and the integrity checks pass.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DatabaseError> {
        let mut r = bytes;
        binio::read_header(&mut r, MAGIC, "VSDB", VERSION)?;
        let mut payloads: Vec<&[u8]> = Vec::new();
        for tag in SECTIONS {
            let mut found = [0u8; 4];
            r.read_exact(&mut found).map_err(FormatError::from)?;
            if &found != tag {
                return Err(FormatError::corrupt(format!(
                    "expected section {}, found {}",
                    String::from_utf8_lossy(tag),
                    String::from_utf8_lossy(&found)
                ))
                .into());
            }
            let len = r.read_u64::<LittleEndian>().map_err(FormatError::from)?;
            if len > r.len() as u64 {
                return Err(FormatError::corrupt(format!("section {} truncated", String::from_utf8_lossy(tag))).into());
            }
            let (head, tail) = r.split_at(len as usize);
            payloads.push(head);
            r = tail;
        }
        if !r.is_empty() {
            return Err(FormatError::corrupt("trailing bytes after last section").into());
        }
        let db = parse_sections(&payloads).map_err(DatabaseError::Format)?;
        db.check_integrity().map_err(|e| FormatError::corrupt(format!("{e}")))?;
        Ok(db)
    }
}

fn finish(section: &str, r: &[u8]) -> Result<(), FormatError> {
    if r.is_empty() {
        Ok(())
    } else {
        Err(FormatError::corrupt(format!("{} trailing bytes in section {section}", r.len())))
    }
}

fn parse_sections(p: &[&[u8]]) -> Result<VisualDatabase, FormatError> {
    let mut r = p[0];
    let window = r.read_f64::<LittleEndian>()?;
    let ratio = r.read_f64::<LittleEndian>()?;
    let max_distance = r.read_u32::<LittleEndian>()?;
    let duplicate_fraction = r.read_f64::<LittleEndian>()?;
    let duplicate_min_observers = r.read_u32::<LittleEndian>()?;
    let recent_point_window = r.read_u64::<LittleEndian>()?;
    let backend = match r.read_u8()? {
        0 => GlobalBackend::Vlad,
        1 => GlobalBackend::BagOfWords,
        t => return Err(FormatError::corrupt(format!("unknown global backend {t}"))),
    };
    let next_keyframe = r.read_u32::<LittleEndian>()?;
    let next_map_point = r.read_u32::<LittleEndian>()?;
    let frames_processed = r.read_u64::<LittleEndian>()?;
    finish("CONF", r)?;
    let config = DatabaseConfig {
        grid: GridMatchParams { window, descriptor: MatchParams { ratio, max_distance } },
        duplicate_fraction,
        duplicate_min_observers,
        recent_point_window,
    };

    let mut r = p[1];
    let mut k = [0.0; 4];
    for v in k.iter_mut() {
        *v = r.read_f64::<LittleEndian>()?;
    }
    let (w, h) = (r.read_u32::<LittleEndian>()?, r.read_u32::<LittleEndian>()?);
    finish("CAMR", r)?;
    let camera = PinholeCamera::new(k[0], k[1], k[2], k[3], w, h).map_err(|e| FormatError::corrupt(e.to_string()))?;

    let mut r = p[2];
    let vocabulary = Vocabulary::read_from(&mut r)?;
    finish("VOCB", r)?;

    let mut r = p[3];
    let n = count(&mut r, 4 + 8 + 56 + 8 + 8)?;
    let mut keyframes = BTreeMap::new();
    for _ in 0..n {
        let id = KeyframeId(r.read_u32::<LittleEndian>()?);
        let timestamp = r.read_f64::<LittleEndian>()?;
        let pose = binio::read_pose(&mut r)?;
        let nk = count(&mut r, 16 + 8 + 1 + 32 + 4 + 4 + 8)?;
        let mut keypoints = Vec::with_capacity(nk);
        let mut descriptors = Vec::with_capacity(nk);
        let mut links = Vec::with_capacity(nk);
        for _ in 0..nk {
            let position = binio::read_pixel(&mut r)?;
            let size = r.read_f64::<LittleEndian>()?;
            let octave = r.read_u8()?;
            keypoints.push(Keypoint { position, size, octave });
            descriptors.push(binio::read_descriptor(&mut r)?);
            let map_point = read_opt_u32(&mut r)?.map(MapPointId);
            let surfel = read_opt_u32(&mut r)?.map(SurfelId);
            let nn = count(&mut r, 4)?;
            let neighbors = (0..nn).map(|_| r.read_u32::<LittleEndian>().map(SurfelId)).collect::<Result<Vec<_>, _>>()?;
            links.push(KeypointLink { map_point, surfel, neighbors });
        }
        let dim = count(&mut r, 8)?;
        let g = (0..dim).map(|_| r.read_f64::<LittleEndian>()).collect::<Result<Vec<_>, _>>()?;
        if dim != vocabulary.dim(backend) {
            return Err(FormatError::corrupt(format!("keyframe {id} global dimension {dim}")));
        }
        let global = GlobalDescriptor::from_normalized(g).map_err(|e| FormatError::corrupt(e.to_string()))?;
        let local = LocalFeatures::new(keypoints, descriptors).map_err(|e| FormatError::corrupt(e.to_string()))?;
        let features = FrameFeatures::new(local, global);
        if keyframes.insert(id, Keyframe { id, timestamp, pose, features, links }).is_some() {
            return Err(FormatError::corrupt(format!("duplicate keyframe {id}")));
        }
    }
    finish("KFRM", r)?;

    let mut r = p[4];
    let n = count(&mut r, 4 + 24 + 4 + 32 + 4 + 8 + 1 + 8)?;
    let mut map_points = BTreeMap::new();
    for _ in 0..n {
        let id = MapPointId(r.read_u32::<LittleEndian>()?);
        let position = binio::read_vec3(&mut r)?;
        let surfel = SurfelId(r.read_u32::<LittleEndian>()?);
        let descriptor = binio::read_descriptor(&mut r)?;
        let creation_frame = KeyframeId(r.read_u32::<LittleEndian>()?);
        let creation_seq = r.read_u64::<LittleEndian>()?;
        let reobserved = match r.read_u8()? {
            0 => false,
            1 => true,
            v => return Err(FormatError::corrupt(format!("bad flag {v}"))),
        };
        let no = count(&mut r, 8)?;
        let mut observations = BTreeMap::new();
        for _ in 0..no {
            let kf = KeyframeId(r.read_u32::<LittleEndian>()?);
            let idx = r.read_u32::<LittleEndian>()?;
            observations.insert(kf, idx);
        }
        let point = MapPoint { id, position, surfel, descriptor, observations, creation_frame, creation_seq, reobserved };
        if map_points.insert(id, point).is_some() {
            return Err(FormatError::corrupt(format!("duplicate map point {id}")));
        }
    }
    finish("MPTS", r)?;

    let mut r = p[5];
    let n = count(&mut r, 12)?;
    let mut stored = Vec::with_capacity(n);
    for _ in 0..n {
        let a = KeyframeId(r.read_u32::<LittleEndian>()?);
        let b = KeyframeId(r.read_u32::<LittleEndian>()?);
        stored.push((a, b, r.read_u32::<LittleEndian>()?));
    }
    finish("EDGE", r)?;
    let covisibility = CovisibilityGraph::from_points(map_points.values());
    if covisibility.edges() != stored {
        return Err(FormatError::corrupt("stored covisibility edges disagree with observations"));
    }

    let mut surfel_points: BTreeMap<SurfelId, BTreeSet<MapPointId>> = BTreeMap::new();
    for p in map_points.values() {
        surfel_points.entry(p.surfel).or_default().insert(p.id);
    }
    let mut surfel_keyframes: BTreeMap<SurfelId, BTreeSet<KeyframeId>> = BTreeMap::new();
    for kf in keyframes.values() {
        for s in kf.links.iter().filter_map(|l| l.surfel) {
            surfel_keyframes.entry(s).or_default().insert(kf.id);
        }
    }
    Ok(VisualDatabase {
        config,
        camera,
        vocabulary,
        backend,
        keyframes,
        map_points,
        covisibility,
        surfel_points,
        surfel_keyframes,
        next_keyframe,
        next_map_point,
        frames_processed,
    })
}
