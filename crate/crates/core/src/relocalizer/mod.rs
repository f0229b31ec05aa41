//! Single-image relocalization: global retrieval, covisibility clustering,
//! local 2D-3D matching with neighbor-surfel expansion, essential-matrix
//! gating, PnP with RANSAC, motion-only refinement and pose verification.

mod epnp;
mod essential;
mod record;
mod refine;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::database::{
    local_grid_match, DatabaseError, GridMatchParams, KeyframeId, KeypointGrid, MapPointId, ProjectedPoint, VisualDatabase, DEFAULT_WINDOW,
};
use crate::descriptor::{match_ratio, Descriptor, FrameFeatures, MatchParams};
use crate::geometry::{Pose, Vec3};
use crate::simulator::sub_rng;
use crate::surfel_map::{SurfelMap, Z_NEAR};

pub use epnp::{align_rigid, epnp, pnp_ransac, reprojection_error, PnpOutcome, PointMatch, RansacParams};
pub use essential::{eight_point, essential_check, sampson_error, EssentialOutcome, EssentialParams, EssentialSkip};
pub use record::{read_records, write_records, RecordError, RelocStatus, ResultRecord};
pub use refine::{chi2, motion_only, reprojection_jacobian, reprojection_residual, MotionOutcome, MotionSettings, CHI2_GATE};

const GRID_CELL: f64 = 16.0;

/// Which local map the query is matched against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum LocalMode {
    /// Covisible map points plus points on neighboring surfels.
    #[default]
    Full,
    /// Covisible map points only.
    VisibleOnly,
    /// Best retrieved keyframe only, keypoints lifted to their surfel centers.
    Naive,
}

impl LocalMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            LocalMode::Full => "fn",
            LocalMode::VisibleOnly => "f",
            LocalMode::Naive => "naive",
        }
    }
}

impl fmt::Display for LocalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LocalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "fn" => Ok(LocalMode::Full),
            "f" => Ok(LocalMode::VisibleOnly),
            "naive" => Ok(LocalMode::Naive),
            other => Err(format!("unknown local mode {other:?} (expected fn, f or naive)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RelocConfig {
    pub top_k: usize,
    pub n_max: usize,
    pub n_co: usize,
    pub theta_in: usize,
    /// Verification distance to the last inlier pose (m).
    pub theta_dist: f64,
    pub matching: MatchParams,
    /// Base re-matching window (px), scaled by keypoint octave.
    pub window: f64,
    pub use_essential: bool,
    pub essential: EssentialParams,
    pub pnp: RansacParams,
    pub motion: MotionSettings,
    pub mode: LocalMode,
    pub seed: u64,
}

impl Default for RelocConfig {
    fn default() -> Self {
        Self {
            top_k: 30,
            n_max: 3,
            n_co: 5,
            theta_in: 15,
            theta_dist: 0.3,
            matching: MatchParams::default(),
            window: DEFAULT_WINDOW,
            use_essential: true,
            essential: EssentialParams::default(),
            pnp: RansacParams::default(),
            motion: MotionSettings::default(),
            mode: LocalMode::Full,
            seed: 0,
        }
    }
}

#[derive(Debug, Error)]
pub enum RelocError {
    #[error(transparent)]
    Database(#[from] DatabaseError),
    #[error("invalid relocalization config: {0}")]
    InvalidConfig(String),
}

impl RelocConfig {
    pub fn validate(&self) -> Result<(), RelocError> {
        let bad = |m: &str| Err(RelocError::InvalidConfig(m.into()));
        if self.top_k == 0 || self.n_max == 0 {
            return bad("top_k and n_max must be positive");
        }
        if !(self.theta_dist > 0.0) || !(self.window > 0.0) {
            return bad("theta_dist and window must be positive");
        }
        if !(self.matching.ratio > 0.0 && self.matching.ratio <= 1.0) {
            return bad("ratio must lie in (0, 1]");
        }
        if !(self.pnp.threshold_px > 0.0 && self.essential.threshold_px > 0.0) {
            return bad("RANSAC thresholds must be positive");
        }
        if !(self.pnp.confidence > 0.0 && self.pnp.confidence < 1.0 && self.essential.confidence > 0.0 && self.essential.confidence < 1.0) {
            return bad("RANSAC confidence must lie in (0, 1)");
        }
        if self.pnp.max_iterations == 0 || self.essential.max_iterations == 0 {
            return bad("RANSAC iteration limits must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CandidateCluster {
    /// Members in retrieval order.
    pub members: Vec<KeyframeId>,
    /// Highest-scoring member.
    pub canonical: KeyframeId,
    pub score: f64,
}

fn find(parent: &mut [usize], mut i: usize) -> usize {
    while parent[i] != i {
        parent[i] = parent[parent[i]];
        i = parent[i];
    }
    i
}

/// Groups retrieved keyframes into connected components of the
/// shared-map-point relation. Clusters are ordered by canonical score
/// (ties to the earlier retrieval rank) and truncated to `n_max`.
pub fn cluster_candidates(db: &VisualDatabase, retrieved: &[(KeyframeId, f64)], n_max: usize) -> Vec<CandidateCluster> {
    cluster_by(retrieved, n_max, |a, b| db.covisibility().weight(a, b) > 0)
}

fn cluster_by(retrieved: &[(KeyframeId, f64)], n_max: usize, linked: impl Fn(KeyframeId, KeyframeId) -> bool) -> Vec<CandidateCluster> {
    let n = retrieved.len();
    let mut parent: Vec<usize> = (0..n).collect();
    for i in 0..n {
        for j in i + 1..n {
            if linked(retrieved[i].0, retrieved[j].0) {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    let mut clusters: Vec<(usize, CandidateCluster)> = Vec::new();
    for i in 0..n {
        let root = find(&mut parent, i);
        match clusters.iter_mut().find(|(r, _)| *r == root) {
            Some((_, c)) => {
                c.members.push(retrieved[i].0);
                if retrieved[i].1 > c.score {
                    c.score = retrieved[i].1;
                    c.canonical = retrieved[i].0;
                }
            }
            None => clusters.push((root, CandidateCluster { members: vec![retrieved[i].0], canonical: retrieved[i].0, score: retrieved[i].1 })),
        }
    }
    // stable sort keeps retrieval order among equal scores
    clusters.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    clusters.into_iter().take(n_max).map(|(_, c)| c).collect()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidatePoints {
    /// Points observed by the canonical keyframe or its best covisible frames.
    pub visible: Vec<MapPointId>,
    /// Points on surfels neighboring the canonical keyframe's keypoints, not in `visible`.
    pub neighbor: Vec<MapPointId>,
}

pub fn gather_candidate_points(db: &VisualDatabase, canonical: KeyframeId, n_co: usize) -> Result<CandidatePoints, RelocError> {
    let kf = db.keyframe(canonical).ok_or(DatabaseError::UnknownKeyframe(canonical))?;
    let mut visible: BTreeSet<MapPointId> = kf.map_points().map(|(_, p)| p).collect();
    for (co, _) in db.best_covisible(canonical, n_co) {
        if let Some(k) = db.keyframe(co) {
            visible.extend(k.map_points().map(|(_, p)| p));
        }
    }
    let surfels: BTreeSet<_> = kf.links.iter().flat_map(|l| l.neighbors.iter().copied()).collect();
    let neighbor: BTreeSet<MapPointId> = surfels.iter().flat_map(|&s| db.points_on_surfel(s)).filter(|p| !visible.contains(p)).collect();
    Ok(CandidatePoints { visible: visible.into_iter().collect(), neighbor: neighbor.into_iter().collect() })
}

/// Inlier-count and distance gate against the last inlier pose.
pub fn verify_pose(n_in: usize, pose: &Pose, last_inlier: Option<&Pose>, theta_in: usize, theta_dist: f64) -> RelocStatus {
    if n_in < theta_in {
        return RelocStatus::Failed;
    }
    match last_inlier {
        None => RelocStatus::Verified,
        Some(last) if pose.translation_distance(last) <= theta_dist => RelocStatus::Verified,
        Some(_) => RelocStatus::Unverified,
    }
}

/// Per-session verification state: the last pose that passed the inlier gate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PoseVerifier {
    pub last_inlier: Option<Pose>,
}

impl PoseVerifier {
    pub fn verify(&mut self, n_in: usize, pose: &Pose, theta_in: usize, theta_dist: f64) -> RelocStatus {
        let status = verify_pose(n_in, pose, self.last_inlier.as_ref(), theta_in, theta_dist);
        if status != RelocStatus::Failed {
            self.last_inlier = Some(*pose);
        }
        status
    }
}

/// What happened to one candidate cluster.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CandidateReport {
    pub canonical: Option<KeyframeId>,
    pub score: f64,
    pub cluster_size: usize,
    pub visible_points: usize,
    pub neighbor_points: usize,
    pub matches: usize,
    pub neighbor_matches: usize,
    pub essential_kept: usize,
    pub essential_skip: Option<EssentialSkip>,
    pub pnp_inliers: usize,
    pub refined_matches: usize,
    pub n_in: usize,
    pub pose: Option<Pose>,
    pub failure: Option<&'static str>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelocalizationResult {
    pub timestamp: f64,
    pub status: RelocStatus,
    pub pose: Option<Pose>,
    pub n_in: usize,
    pub cluster_count: usize,
    pub retrieval: Vec<(KeyframeId, f64)>,
    pub candidates: Vec<CandidateReport>,
    pub reason: Option<&'static str>,
}

impl RelocalizationResult {
    pub fn record(&self) -> ResultRecord {
        ResultRecord {
            timestamp: self.timestamp,
            status: self.status,
            pose: self.pose,
            n_in: self.n_in,
            cluster_count: self.cluster_count,
            reason: self.reason.map(str::to_string),
        }
    }
}

struct Correspondences {
    keypoints: Vec<usize>,
    points: Vec<MapPointId>,
}

/// Descriptor matches of query keypoints against `ids`, restricted to
/// keypoints not yet taken.
fn match_points(db: &VisualDatabase, query: &FrameFeatures, ids: &[MapPointId], taken: &mut [bool], params: &MatchParams) -> Correspondences {
    let free: Vec<usize> = (0..query.descriptors().len()).filter(|&i| !taken[i]).collect();
    let qd: Vec<Descriptor> = free.iter().map(|&i| query.descriptors()[i]).collect();
    let cd: Vec<Descriptor> = ids.iter().map(|id| db.map_point(*id).map(|p| p.descriptor).unwrap_or_default()).collect();
    let mut out = Correspondences { keypoints: Vec::new(), points: Vec::new() };
    for m in match_ratio(&qd, &cd, params) {
        let k = free[m.query];
        taken[k] = true;
        out.keypoints.push(k);
        out.points.push(ids[m.candidate]);
    }
    out
}

fn point_match(query: &FrameFeatures, k: usize, world: Vec3) -> PointMatch {
    let kp = query.keypoints()[k];
    PointMatch { world, pixel: kp.position, octave: kp.octave }
}

/// Where the canonical keyframe sees `point`: its keypoint if observed,
/// otherwise the projection (possibly outside the image).
fn canonical_ray(db: &VisualDatabase, canonical: KeyframeId, point: MapPointId) -> Option<Vec3> {
    let kf = db.keyframe(canonical)?;
    let mp = db.map_point(point)?;
    let cam = db.camera();
    if let Some(&k) = mp.observations.get(&canonical) {
        return Some(cam.lift_unit_plane(&kf.features.keypoints()[k as usize].position));
    }
    let y = kf.pose.inverse_transform_point(&mp.position);
    (y.z > Z_NEAR).then(|| y / y.z)
}

fn localize_cluster(
    db: &VisualDatabase,
    query: &FrameFeatures,
    cluster: &CandidateCluster,
    cfg: &RelocConfig,
    seed: u64,
) -> CandidateReport {
    let mut report = CandidateReport { canonical: Some(cluster.canonical), score: cluster.score, cluster_size: cluster.members.len(), ..Default::default() };
    let cam = db.camera();
    let Ok(points) = gather_candidate_points(db, cluster.canonical, cfg.n_co) else {
        report.failure = Some("unknown_keyframe");
        return report;
    };
    let neighbor: &[MapPointId] = if cfg.mode == LocalMode::Full { &points.neighbor } else { &[] };
    report.visible_points = points.visible.len();
    report.neighbor_points = neighbor.len();

    let mut taken = vec![false; query.descriptors().len()];
    let mut corr = match_points(db, query, &points.visible, &mut taken, &cfg.matching);
    let extra = match_points(db, query, neighbor, &mut taken, &cfg.matching);
    report.neighbor_matches = extra.points.len();
    corr.keypoints.extend(extra.keypoints);
    corr.points.extend(extra.points);
    report.matches = corr.points.len();

    // essential-matrix gate between the canonical keyframe and the query
    let mut rng = sub_rng(seed, cluster.canonical.0 as u64);
    let (mut kps, mut pids) = (Vec::new(), Vec::new());
    if cfg.use_essential {
        let (mut x1, mut x2, mut idx) = (Vec::new(), Vec::new(), Vec::new());
        for (i, (&k, &p)) in corr.keypoints.iter().zip(&corr.points).enumerate() {
            if let Some(r) = canonical_ray(db, cluster.canonical, p) {
                x1.push(r);
                x2.push(cam.lift_unit_plane(&query.keypoints()[k].position));
                idx.push(i);
            }
        }
        let out = essential_check(&x1, &x2, cam.mean_focal(), &cfg.essential, &mut rng);
        report.essential_skip = out.skipped;
        for (j, &i) in idx.iter().enumerate() {
            if out.keep[j] {
                kps.push(corr.keypoints[i]);
                pids.push(corr.points[i]);
            }
        }
    } else {
        kps = corr.keypoints.clone();
        pids = corr.points.clone();
    }
    report.essential_kept = kps.len();

    let matches: Vec<PointMatch> = kps.iter().zip(&pids).map(|(&k, p)| point_match(query, k, db.map_point(*p).expect("gathered point").position)).collect();
    let Some(pnp) = pnp_ransac(&matches, cam, &cfg.pnp, &mut rng) else {
        report.failure = Some("pnp_failed");
        return report;
    };
    report.pnp_inliers = pnp.inlier_count();

    // re-match every candidate point inside the octave-scaled window around its projection
    let mut available = vec![true; query.keypoints().len()];
    let mut used: BTreeSet<MapPointId> = BTreeSet::new();
    let mut final_kps = Vec::new();
    let mut final_pts = Vec::new();
    for ((&k, &p), &inl) in kps.iter().zip(&pids).zip(&pnp.inliers) {
        if inl {
            available[k] = false;
            used.insert(p);
            final_kps.push(k);
            final_pts.push(p);
        }
    }
    let projected: Vec<ProjectedPoint> = points
        .visible
        .iter()
        .chain(neighbor)
        .filter(|p| !used.contains(p))
        .filter_map(|&id| {
            let mp = db.map_point(id)?;
            let y = pnp.pose.inverse_transform_point(&mp.position);
            if y.z <= Z_NEAR {
                return None;
            }
            let px = cam.project(&y)?;
            cam.contains(&px).then_some(ProjectedPoint { point: id, pixel: px, descriptor: mp.descriptor })
        })
        .collect();
    let grid = KeypointGrid::new(query.keypoints(), cam.width, cam.height, GRID_CELL);
    let params = GridMatchParams { window: cfg.window, descriptor: cfg.matching };
    for m in local_grid_match(&projected, query.keypoints(), query.descriptors(), &grid, Some(&available), &params) {
        final_kps.push(m.keypoint);
        final_pts.push(m.point);
    }
    report.refined_matches = final_pts.len();

    let matches: Vec<PointMatch> = final_kps.iter().zip(&final_pts).map(|(&k, p)| point_match(query, k, db.map_point(*p).expect("projected point").position)).collect();
    match motion_only(&pnp.pose, &matches, cam, &cfg.motion) {
        Some(out) => {
            report.n_in = out.inlier_count();
            report.pose = Some(out.pose);
        }
        None => report.failure = Some("refinement_diverged"),
    }
    report
}

/// Best retrieved keyframe only: keypoint-to-keypoint descriptor matches,
/// 3D positions taken from the surfel each keyframe keypoint hit.
fn localize_naive(db: &VisualDatabase, map: &SurfelMap, query: &FrameFeatures, top: (KeyframeId, f64), cfg: &RelocConfig, seed: u64) -> CandidateReport {
    let mut report = CandidateReport { canonical: Some(top.0), score: top.1, cluster_size: 1, ..Default::default() };
    let Some(kf) = db.keyframe(top.0) else {
        report.failure = Some("unknown_keyframe");
        return report;
    };
    let cam = db.camera();
    let mut matches = Vec::new();
    for m in match_ratio(query.descriptors(), kf.features.descriptors(), &cfg.matching) {
        if let Some(s) = kf.links[m.candidate].surfel.and_then(|s| map.get(s)) {
            matches.push(point_match(query, m.query, s.center));
        }
    }
    report.matches = matches.len();
    report.essential_kept = matches.len();
    let mut rng = sub_rng(seed, top.0 .0 as u64);
    let Some(pnp) = pnp_ransac(&matches, cam, &cfg.pnp, &mut rng) else {
        report.failure = Some("pnp_failed");
        return report;
    };
    report.pnp_inliers = pnp.inlier_count();
    report.refined_matches = matches.len();
    match motion_only(&pnp.pose, &matches, cam, &cfg.motion) {
        Some(out) => {
            report.n_in = out.inlier_count();
            report.pose = Some(out.pose);
        }
        None => report.failure = Some("refinement_diverged"),
    }
    report
}

/// Best pose over all candidates without verification. Pure in its inputs.
pub fn localize(
    db: &VisualDatabase,
    map: &SurfelMap,
    timestamp: f64,
    query: &FrameFeatures,
    cfg: &RelocConfig,
) -> Result<(Vec<(KeyframeId, f64)>, Vec<CandidateReport>), RelocError> {
    cfg.validate()?;
    let retrieval = db.query_index(&query.global, cfg.top_k)?;
    let seed = cfg.seed ^ timestamp.to_bits();
    if retrieval.is_empty() {
        return Ok((retrieval, Vec::new()));
    }
    let candidates = match cfg.mode {
        LocalMode::Naive => vec![localize_naive(db, map, query, retrieval[0], cfg, seed)],
        _ => cluster_candidates(db, &retrieval, cfg.n_max).iter().map(|c| localize_cluster(db, query, c, cfg, seed)).collect(),
    };
    Ok((retrieval, candidates))
}

/// Full pipeline for one query, threading the verification state.
pub fn relocalize(
    db: &VisualDatabase,
    map: &SurfelMap,
    timestamp: f64,
    query: &FrameFeatures,
    cfg: &RelocConfig,
    verifier: &mut PoseVerifier,
) -> Result<RelocalizationResult, RelocError> {
    let (retrieval, candidates) = localize(db, map, timestamp, query, cfg)?;
    // first maximum wins, and candidates are already in canonical-score order
    let best = candidates
        .iter()
        .filter(|c| c.pose.is_some())
        .fold(None::<&CandidateReport>, |acc, c| match acc {
            Some(b) if b.n_in >= c.n_in => Some(b),
            _ => Some(c),
        });
    let mut result = RelocalizationResult {
        timestamp,
        status: RelocStatus::Failed,
        pose: None,
        n_in: best.map_or(0, |b| b.n_in),
        cluster_count: candidates.len(),
        retrieval,
        candidates: candidates.clone(),
        reason: None,
    };
    let Some(best) = best else {
        result.reason = Some(candidates.iter().find_map(|c| c.failure).unwrap_or("no_candidates"));
        return Ok(result);
    };
    let pose = best.pose.expect("filtered on pose");
    result.status = verifier.verify(best.n_in, &pose, cfg.theta_in, cfg.theta_dist);
    if result.status == RelocStatus::Failed {
        result.reason = Some("too_few_inliers");
    } else {
        result.pose = Some(pose);
    }
    Ok(result)
}
