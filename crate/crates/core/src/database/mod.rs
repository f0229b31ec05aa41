//! Keyframe / map point database built from posed frames and surfel
//! associations, with covisibility bookkeeping, culling and global retrieval.

mod grid;
mod io;

pub use grid::{local_grid_match, GridMatch, GridMatchParams, KeypointGrid, ProjectedPoint, DEFAULT_WINDOW};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::binio::FormatError;
use crate::descriptor::{Descriptor, DescriptorError, FrameFeatures, GlobalBackend, GlobalDescriptor, LocalFeatures, Vocabulary};
use crate::geometry::{PinholeCamera, Pose, Vec3};
use crate::surfel_map::{associate_keypoints, render_index_map, SurfelId, SurfelMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct KeyframeId(pub u32);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MapPointId(pub u32);

impl fmt::Display for KeyframeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl fmt::Display for MapPointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum DatabaseError {
    #[error(transparent)]
    Descriptor(#[from] DescriptorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("database is empty")]
    Empty,
    #[error("unknown keyframe {0}")]
    UnknownKeyframe(KeyframeId),
    #[error("unknown map point {0}")]
    UnknownMapPoint(MapPointId),
    #[error("global descriptor has dimension {found}, database expects {expected}")]
    GlobalDimension { expected: usize, found: usize },
    #[error("integrity violation: {0}")]
    Integrity(String),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DatabaseConfig {
    pub grid: GridMatchParams,
    /// Fraction of a frame's linked keypoints that must be well observed for
    /// the frame to count as a duplicate.
    pub duplicate_fraction: f64,
    /// Other live observers a point needs to count as well observed.
    pub duplicate_min_observers: u32,
    /// Frames after creation within which a new point must be re-observed.
    pub recent_point_window: u64,
}

impl Default for DatabaseConfig {
    fn default() -> Self {
        Self {
            grid: GridMatchParams::default(),
            duplicate_fraction: 0.9,
            duplicate_min_observers: 3,
            recent_point_window: 2,
        }
    }
}

/// Per-keypoint links of a keyframe.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct KeypointLink {
    pub map_point: Option<MapPointId>,
    pub surfel: Option<SurfelId>,
    /// Other surfels inside the keypoint's size radius, ascending.
    pub neighbors: Vec<SurfelId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Keyframe {
    pub id: KeyframeId,
    pub timestamp: f64,
    pub pose: Pose,
    pub features: FrameFeatures,
    pub links: Vec<KeypointLink>,
}

impl Keyframe {
    pub fn map_points(&self) -> impl Iterator<Item = (usize, MapPointId)> + '_ {
        self.links.iter().enumerate().filter_map(|(i, l)| l.map_point.map(|p| (i, p)))
    }

    pub fn map_point_count(&self) -> usize {
        self.links.iter().filter(|l| l.map_point.is_some()).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapPoint {
    pub id: MapPointId,
    pub position: Vec3,
    pub surfel: SurfelId,
    pub descriptor: Descriptor,
    /// Observing keyframe -> keypoint index.
    pub observations: BTreeMap<KeyframeId, u32>,
    pub creation_frame: KeyframeId,
    /// Sequence number of the processed frame that created the point.
    pub creation_seq: u64,
    /// Set once any later frame matched the point, even if that frame was culled.
    pub reobserved: bool,
}

impl MapPoint {
    /// First (lowest id) live observer.
    pub fn anchor(&self) -> Option<(KeyframeId, u32)> {
        self.observations.iter().next().map(|(&k, &i)| (k, i))
    }
}

/// Symmetric keyframe graph weighted by the number of shared map points.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CovisibilityGraph {
    edges: BTreeMap<KeyframeId, BTreeMap<KeyframeId, u32>>,
}

impl CovisibilityGraph {
    pub fn weight(&self, a: KeyframeId, b: KeyframeId) -> u32 {
        self.edges.get(&a).and_then(|m| m.get(&b)).copied().unwrap_or(0)
    }

    pub fn neighbors(&self, a: KeyframeId) -> impl Iterator<Item = (KeyframeId, u32)> + '_ {
        self.edges.get(&a).into_iter().flat_map(|m| m.iter().map(|(&k, &w)| (k, w)))
    }

    /// Edges with `a < b`, ascending.
    pub fn edges(&self) -> Vec<(KeyframeId, KeyframeId, u32)> {
        let mut out = Vec::new();
        for (&a, m) in &self.edges {
            for (&b, &w) in m {
                if a < b {
                    out.push((a, b, w));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    fn increment(&mut self, a: KeyframeId, b: KeyframeId) {
        *self.edges.entry(a).or_default().entry(b).or_insert(0) += 1;
        *self.edges.entry(b).or_default().entry(a).or_insert(0) += 1;
    }

    fn decrement(&mut self, a: KeyframeId, b: KeyframeId) {
        for (x, y) in [(a, b), (b, a)] {
            if let Some(m) = self.edges.get_mut(&x) {
                if let Some(w) = m.get_mut(&y) {
                    *w -= 1;
                    if *w == 0 {
                        m.remove(&y);
                    }
                }
                if m.is_empty() {
                    self.edges.remove(&x);
                }
            }
        }
    }

    fn remove_node(&mut self, a: KeyframeId) {
        if let Some(m) = self.edges.remove(&a) {
            for b in m.keys() {
                if let Some(n) = self.edges.get_mut(b) {
                    n.remove(&a);
                    if n.is_empty() {
                        self.edges.remove(b);
                    }
                }
            }
        }
    }

    /// Builds the graph from map point observation lists.
    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a MapPoint>) -> Self {
        let mut g = Self::default();
        for p in points {
            let obs: Vec<KeyframeId> = p.observations.keys().copied().collect();
            for i in 0..obs.len() {
                for j in i + 1..obs.len() {
                    g.increment(obs[i], obs[j]);
                }
            }
        }
        g
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameStatus {
    /// Stored as a keyframe.
    Inserted,
    /// Processed, then removed as a duplicate of existing keyframes.
    Duplicate,
    /// Nothing rendered at the pose or no keypoint could be linked.
    Rejected,
}

impl FrameStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FrameStatus::Inserted => "inserted",
            FrameStatus::Duplicate => "duplicate",
            FrameStatus::Rejected => "rejected",
        }
    }
}

/// Diagnostics of one `process_frame` call.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameReport {
    pub seq: u64,
    pub timestamp: f64,
    pub keyframe: Option<KeyframeId>,
    pub status: FrameStatus,
    pub keypoints: usize,
    pub associated: usize,
    pub out_of_bounds: usize,
    pub covisible_frames: usize,
    pub covisible_points: usize,
    pub matches: usize,
    pub new_points: usize,
    pub culled_keyframes: Vec<KeyframeId>,
    pub culled_points: usize,
}

impl fmt::Display for FrameReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kf = self.keyframe.map(|k| k.0.to_string()).unwrap_or_else(|| "-".into());
        let culled: Vec<String> = self.culled_keyframes.iter().map(|k| k.0.to_string()).collect();
        write!(
            f,
            "frame seq={} ts={} status={} kf={} keypoints={} associated={} out_of_bounds={} covisible_frames={} covisible_points={} matches={} new_points={} culled_keyframes={} culled_points={}",
            self.seq,
            self.timestamp,
            self.status.as_str(),
            kf,
            self.keypoints,
            self.associated,
            self.out_of_bounds,
            self.covisible_frames,
            self.covisible_points,
            self.matches,
            self.new_points,
            if culled.is_empty() { "-".to_string() } else { culled.join(",") },
            self.culled_points
        )
    }
}

/// Ids removed by one culling pass.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct CullReport {
    pub keyframes: Vec<KeyframeId>,
    pub map_points: Vec<MapPointId>,
}

/// Index of the observation descriptor with the smallest median Hamming
/// distance to the other observations (lower median; earliest on ties).
pub fn representative_index(descriptors: &[Descriptor]) -> usize {
    if descriptors.len() <= 1 {
        return 0;
    }
    let mut best = (0, u32::MAX);
    for (i, d) in descriptors.iter().enumerate() {
        let mut dists: Vec<u32> = descriptors
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, o)| d.hamming(o))
            .collect();
        dists.sort_unstable();
        let median = dists[(dists.len() - 1) / 2];
        if median < best.1 {
            best = (i, median);
        }
    }
    best.0
}

#[derive(Clone, Debug, PartialEq)]
pub struct VisualDatabase {
    config: DatabaseConfig,
    camera: PinholeCamera,
    vocabulary: Vocabulary,
    backend: GlobalBackend,
    keyframes: BTreeMap<KeyframeId, Keyframe>,
    map_points: BTreeMap<MapPointId, MapPoint>,
    covisibility: CovisibilityGraph,
    /// Surfel -> map points tied to it.
    surfel_points: BTreeMap<SurfelId, BTreeSet<MapPointId>>,
    /// Surfel -> keyframes with a keypoint associated to it.
    surfel_keyframes: BTreeMap<SurfelId, BTreeSet<KeyframeId>>,
    next_keyframe: u32,
    next_map_point: u32,
    frames_processed: u64,
}

impl VisualDatabase {
    pub fn new(camera: PinholeCamera, vocabulary: Vocabulary, backend: GlobalBackend, config: DatabaseConfig) -> Self {
        Self {
            config,
            camera,
            vocabulary,
            backend,
            keyframes: BTreeMap::new(),
            map_points: BTreeMap::new(),
            covisibility: CovisibilityGraph::default(),
            surfel_points: BTreeMap::new(),
            surfel_keyframes: BTreeMap::new(),
            next_keyframe: 0,
            next_map_point: 0,
            frames_processed: 0,
        }
    }

    pub fn config(&self) -> &DatabaseConfig {
        &self.config
    }

    pub fn camera(&self) -> &PinholeCamera {
        &self.camera
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocabulary
    }

    pub fn backend(&self) -> GlobalBackend {
        self.backend
    }

    pub fn keyframes(&self) -> &BTreeMap<KeyframeId, Keyframe> {
        &self.keyframes
    }

    pub fn keyframe(&self, id: KeyframeId) -> Option<&Keyframe> {
        self.keyframes.get(&id)
    }

    pub fn map_points(&self) -> &BTreeMap<MapPointId, MapPoint> {
        &self.map_points
    }

    pub fn map_point(&self, id: MapPointId) -> Option<&MapPoint> {
        self.map_points.get(&id)
    }

    pub fn covisibility(&self) -> &CovisibilityGraph {
        &self.covisibility
    }

    pub fn points_on_surfel(&self, s: SurfelId) -> impl Iterator<Item = MapPointId> + '_ {
        self.surfel_points.get(&s).into_iter().flat_map(|set| set.iter().copied())
    }

    pub fn keyframes_observing_surfel(&self, s: SurfelId) -> impl Iterator<Item = KeyframeId> + '_ {
        self.surfel_keyframes.get(&s).into_iter().flat_map(|set| set.iter().copied())
    }

    pub fn frames_processed(&self) -> u64 {
        self.frames_processed
    }

    pub fn next_keyframe_id(&self) -> KeyframeId {
        KeyframeId(self.next_keyframe)
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    /// Computes the global descriptor of `local` with this database's vocabulary.
    pub fn describe(&self, local: LocalFeatures) -> Result<FrameFeatures, DescriptorError> {
        FrameFeatures::describe(local, &self.vocabulary, self.backend)
    }

    pub fn global_dim(&self) -> usize {
        self.vocabulary.dim(self.backend)
    }

    /// Up to `n` covisible keyframes of `kf`, by weight descending then id.
    pub fn best_covisible(&self, kf: KeyframeId, n: usize) -> Vec<(KeyframeId, u32)> {
        let mut v: Vec<(KeyframeId, u32)> = self.covisibility.neighbors(kf).collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(n);
        v
    }

    pub fn set_pose(&mut self, kf: KeyframeId, pose: Pose) -> Result<(), DatabaseError> {
        self.keyframes.get_mut(&kf).ok_or(DatabaseError::UnknownKeyframe(kf))?.pose = pose;
        Ok(())
    }

    pub fn set_point_position(&mut self, p: MapPointId, position: Vec3) -> Result<(), DatabaseError> {
        self.map_points.get_mut(&p).ok_or(DatabaseError::UnknownMapPoint(p))?.position = position;
        Ok(())
    }

    /// Top-`k` keyframes by global similarity, descending, ties to the smaller id.
    pub fn query_index(&self, global: &GlobalDescriptor, k: usize) -> Result<Vec<(KeyframeId, f64)>, DatabaseError> {
        if self.keyframes.is_empty() {
            return Err(DatabaseError::Empty);
        }
        if global.dim() != self.global_dim() {
            return Err(DatabaseError::GlobalDimension { expected: self.global_dim(), found: global.dim() });
        }
        let mut scored: Vec<(KeyframeId, f64)> = self
            .keyframes
            .values()
            .map(|kf| (kf.id, kf.features.global.similarity(global)))
            .collect();
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Inserts one posed frame: associates keypoints with surfels, matches
    /// covisible map points in a local window, creates new points, updates
    /// covisibility and culls.
    pub fn process_frame(&mut self, timestamp: f64, features: FrameFeatures, pose: Pose, map: &SurfelMap) -> Result<FrameReport, DatabaseError> {
        if features.global.dim() != self.global_dim() {
            return Err(DatabaseError::GlobalDimension { expected: self.global_dim(), found: features.global.dim() });
        }
        let cam = self.camera;
        let index_map = render_index_map(map, &pose, &cam);
        let assoc = associate_keypoints(&index_map, features.keypoints());
        let mut report = FrameReport {
            seq: self.frames_processed,
            timestamp,
            keyframe: None,
            status: FrameStatus::Rejected,
            keypoints: features.keypoints().len(),
            associated: assoc.associated(),
            out_of_bounds: assoc.out_of_bounds,
            covisible_frames: 0,
            covisible_points: 0,
            matches: 0,
            new_points: 0,
            culled_keyframes: Vec::new(),
            culled_points: 0,
        };
        if index_map.is_blank() || report.associated == 0 {
            return Ok(report);
        }

        let mut links: Vec<KeypointLink> = assoc
            .associations
            .iter()
            .map(|a| match a {
                Some(a) => KeypointLink { map_point: None, surfel: a.surfel, neighbors: a.neighbors.clone() },
                None => KeypointLink::default(),
            })
            .collect();

        // Covisible keyframes: those observing any surfel seen now.
        let surfels: BTreeSet<SurfelId> = links.iter().filter_map(|l| l.surfel).collect();
        let mut covisible: BTreeSet<KeyframeId> = BTreeSet::new();
        for s in &surfels {
            covisible.extend(self.keyframes_observing_surfel(*s));
        }
        let mut candidate_points: BTreeSet<MapPointId> = BTreeSet::new();
        for kf in &covisible {
            candidate_points.extend(self.keyframes[kf].map_points().map(|(_, p)| p));
        }
        report.covisible_frames = covisible.len();
        report.covisible_points = candidate_points.len();

        let projected: Vec<ProjectedPoint> = candidate_points
            .iter()
            .filter_map(|id| {
                let p = &self.map_points[id];
                let pc = pose.inverse_transform_point(&p.position);
                let px = cam.project(&pc)?;
                cam.contains(&px).then_some(ProjectedPoint { point: *id, pixel: px, descriptor: p.descriptor })
            })
            .collect();
        let grid = KeypointGrid::new(features.keypoints(), cam.width, cam.height, 16.0);
        let matches = local_grid_match(&projected, features.keypoints(), features.descriptors(), &grid, None, &self.config.grid);
        report.matches = matches.len();

        let id = KeyframeId(self.next_keyframe);
        self.next_keyframe += 1;
        let seq = self.frames_processed;
        self.frames_processed += 1;

        for m in &matches {
            links[m.keypoint].map_point = Some(m.point);
        }
        let mut new_points = Vec::new();
        for (i, link) in links.iter_mut().enumerate() {
            if link.map_point.is_some() {
                continue;
            }
            let Some(s) = link.surfel else { continue };
            let center = map.get(s).map(|sf| sf.center).ok_or_else(|| DatabaseError::Integrity(format!("surfel {} not in map", s.0)))?;
            let pid = MapPointId(self.next_map_point);
            self.next_map_point += 1;
            link.map_point = Some(pid);
            new_points.push((pid, s, center, i));
        }
        report.new_points = new_points.len();

        for s in links.iter().filter_map(|l| l.surfel) {
            self.surfel_keyframes.entry(s).or_default().insert(id);
        }
        self.keyframes.insert(id, Keyframe { id, timestamp, pose, features, links });

        for (pid, s, center, i) in new_points {
            let descriptor = self.keyframes[&id].features.descriptors()[i];
            self.map_points.insert(
                pid,
                MapPoint {
                    id: pid,
                    position: center,
                    surfel: s,
                    descriptor,
                    observations: BTreeMap::from([(id, i as u32)]),
                    creation_frame: id,
                    creation_seq: seq,
                    reobserved: false,
                },
            );
            self.surfel_points.entry(s).or_default().insert(pid);
        }
        for m in &matches {
            self.add_observation(m.point, id, m.keypoint as u32);
        }

        let culled = self.cull(id, seq);
        report.culled_points = culled.map_points.len();
        report.status = if culled.keyframes.contains(&id) {
            FrameStatus::Duplicate
        } else {
            report.keyframe = Some(id);
            FrameStatus::Inserted
        };
        report.culled_keyframes = culled.keyframes;
        Ok(report)
    }

    fn add_observation(&mut self, pid: MapPointId, kf: KeyframeId, idx: u32) {
        let others: Vec<KeyframeId> = self.map_points[&pid].observations.keys().copied().collect();
        for o in others {
            self.covisibility.increment(kf, o);
        }
        let point = self.map_points.get_mut(&pid).expect("matched point exists");
        point.observations.insert(kf, idx);
        if kf > point.creation_frame {
            point.reobserved = true;
        }
        self.refresh_descriptor(pid);
    }

    /// Re-selects the representative descriptor of `pid` over its live observations.
    pub fn refresh_descriptor(&mut self, pid: MapPointId) {
        let Some(point) = self.map_points.get(&pid) else { return };
        let descs: Vec<Descriptor> = point
            .observations
            .iter()
            .map(|(kf, &i)| self.keyframes[kf].features.descriptors()[i as usize])
            .collect();
        if descs.is_empty() {
            return;
        }
        let best = descs[representative_index(&descs)];
        self.map_points.get_mut(&pid).unwrap().descriptor = best;
    }

    /// Applies the culling rules after frame `new` (processing sequence `seq`).
    fn cull(&mut self, new: KeyframeId, seq: u64) -> CullReport {
        let mut report = CullReport::default();

        // Duplicate-frame rule on the new frame.
        let kf = &self.keyframes[&new];
        let linked: Vec<MapPointId> = kf.map_points().map(|(_, p)| p).collect();
        let well_observed = linked
            .iter()
            .filter(|p| self.map_points[p].observations.len() as u32 > self.config.duplicate_min_observers)
            .count();
        if !linked.is_empty() && well_observed as f64 >= self.config.duplicate_fraction * linked.len() as f64 {
            self.remove_keyframe(new, &mut report);
        }

        // New points not re-observed within the window.
        if seq >= self.config.recent_point_window {
            let deadline = seq - self.config.recent_point_window;
            let stale: Vec<MapPointId> = self
                .map_points
                .values()
                .filter(|p| !p.reobserved && p.creation_seq <= deadline)
                .map(|p| p.id)
                .collect();
            for p in stale {
                self.remove_map_point(p, &mut report);
            }
        }

        // Keyframes left without map points.
        let empty: Vec<KeyframeId> = self
            .keyframes
            .values()
            .filter(|k| k.map_point_count() == 0)
            .map(|k| k.id)
            .collect();
        for k in empty {
            self.remove_keyframe(k, &mut report);
        }
        report.keyframes.sort();
        report.map_points.sort();
        report
    }

    fn remove_map_point(&mut self, pid: MapPointId, report: &mut CullReport) {
        let Some(point) = self.map_points.remove(&pid) else { return };
        let obs: Vec<(KeyframeId, u32)> = point.observations.iter().map(|(&k, &i)| (k, i)).collect();
        for (a_i, &(a, idx)) in obs.iter().enumerate() {
            if let Some(kf) = self.keyframes.get_mut(&a) {
                kf.links[idx as usize].map_point = None;
            }
            for &(b, _) in &obs[a_i + 1..] {
                self.covisibility.decrement(a, b);
            }
        }
        if let Some(set) = self.surfel_points.get_mut(&point.surfel) {
            set.remove(&pid);
            if set.is_empty() {
                self.surfel_points.remove(&point.surfel);
            }
        }
        report.map_points.push(pid);
    }

    fn remove_keyframe(&mut self, id: KeyframeId, report: &mut CullReport) {
        let Some(kf) = self.keyframes.remove(&id) else { return };
        self.covisibility.remove_node(id);
        for link in &kf.links {
            if let Some(s) = link.surfel {
                if let Some(set) = self.surfel_keyframes.get_mut(&s) {
                    set.remove(&id);
                    if set.is_empty() {
                        self.surfel_keyframes.remove(&s);
                    }
                }
            }
        }
        for (_, pid) in kf.map_points() {
            let orphan = match self.map_points.get_mut(&pid) {
                Some(p) => {
                    p.observations.remove(&id);
                    p.observations.is_empty()
                }
                None => false,
            };
            if orphan {
                self.remove_map_point(pid, report);
            } else {
                self.refresh_descriptor(pid);
            }
        }
        report.keyframes.push(id);
    }

    /// Checks every cross reference, the covisibility graph against a fresh
    /// recomputation, and the derived surfel indices.
    pub fn check_integrity(&self) -> Result<(), DatabaseError> {
        let fail = |msg: String| Err(DatabaseError::Integrity(msg));
        for (id, p) in &self.map_points {
            if p.id != *id {
                return fail(format!("map point key {id} holds id {}", p.id));
            }
            if p.id.0 >= self.next_map_point {
                return fail(format!("map point {id} beyond id counter"));
            }
            if p.observations.is_empty() {
                return fail(format!("map point {id} has no observations"));
            }
            let mut descriptor_found = false;
            for (kf, &idx) in &p.observations {
                let Some(k) = self.keyframes.get(kf) else {
                    return fail(format!("map point {id} observed by missing keyframe {kf}"));
                };
                let Some(link) = k.links.get(idx as usize) else {
                    return fail(format!("map point {id} observation index {idx} out of range in keyframe {kf}"));
                };
                if link.map_point != Some(*id) {
                    return fail(format!("keyframe {kf} keypoint {idx} does not point back to map point {id}"));
                }
                descriptor_found |= k.features.descriptors()[idx as usize] == p.descriptor;
            }
            if !descriptor_found {
                return fail(format!("map point {id} descriptor is not one of its observations"));
            }
            if !self.surfel_points.get(&p.surfel).is_some_and(|s| s.contains(id)) {
                return fail(format!("map point {id} missing from surfel index"));
            }
        }
        let mut surfel_keyframes: BTreeMap<SurfelId, BTreeSet<KeyframeId>> = BTreeMap::new();
        for (id, k) in &self.keyframes {
            if k.id != *id || k.id.0 >= self.next_keyframe {
                return fail(format!("keyframe key {id} inconsistent"));
            }
            if k.links.len() != k.features.keypoints().len() {
                return fail(format!("keyframe {id} link count mismatch"));
            }
            if k.map_point_count() == 0 {
                return fail(format!("keyframe {id} has no map points"));
            }
            for (i, link) in k.links.iter().enumerate() {
                if let Some(s) = link.surfel {
                    if link.neighbors.contains(&s) {
                        return fail(format!("keyframe {id} keypoint {i} lists its own surfel as neighbor"));
                    }
                    surfel_keyframes.entry(s).or_default().insert(*id);
                }
                if let Some(p) = link.map_point {
                    let Some(point) = self.map_points.get(&p) else {
                        return fail(format!("keyframe {id} keypoint {i} links missing map point {p}"));
                    };
                    if point.observations.get(id) != Some(&(i as u32)) {
                        return fail(format!("map point {p} does not list keyframe {id} keypoint {i}"));
                    }
                }
            }
        }
        if surfel_keyframes != self.surfel_keyframes {
            return fail("surfel-to-keyframe index out of date".into());
        }
        let count: usize = self.surfel_points.values().map(|s| s.len()).sum();
        if count != self.map_points.len() {
            return fail("surfel-to-point index has stale entries".into());
        }
        if CovisibilityGraph::from_points(self.map_points.values()) != self.covisibility {
            return fail("covisibility graph differs from recomputation".into());
        }
        Ok(())
    }
}
