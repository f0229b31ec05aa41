//! Relocalization metrics: pose recall at a position threshold, mean absolute
//! trajectory error over verified poses, and precision-recall sweeps over the
//! inlier threshold with and without pose verification.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;

use thiserror::Error;

use crate::geometry::TimedPose;
use crate::relocalizer::{verify_pose, RelocStatus, ResultRecord};

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("result at t={0} has no ground-truth pose")]
    UnmatchedTimestamp(f64),
    #[error("duplicate ground-truth timestamp {0}")]
    DuplicateTruth(f64),
    #[error("threshold must be positive and finite, got {0}")]
    BadThreshold(f64),
}

/// Error of one query against its ground truth.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QueryError {
    pub timestamp: f64,
    pub status: RelocStatus,
    pub n_in: usize,
    /// Translation error (m) when a pose was reported.
    pub error: Option<f64>,
}

/// Pairs every result with the ground-truth pose of the same timestamp.
pub fn query_errors(results: &[ResultRecord], truth: &[TimedPose]) -> Result<Vec<QueryError>, EvalError> {
    let mut by_time = HashMap::with_capacity(truth.len());
    for t in truth {
        if by_time.insert(t.timestamp.to_bits(), &t.pose).is_some() {
            return Err(EvalError::DuplicateTruth(t.timestamp));
        }
    }
    results
        .iter()
        .map(|r| {
            let gt = by_time.get(&r.timestamp.to_bits()).ok_or(EvalError::UnmatchedTimestamp(r.timestamp))?;
            Ok(QueryError { timestamp: r.timestamp, status: r.status, n_in: r.n_in, error: r.pose.map(|p| p.translation_distance(gt)) })
        })
        .collect()
}

fn check_threshold(theta: f64) -> Result<(), EvalError> {
    if theta > 0.0 && theta.is_finite() {
        Ok(())
    } else {
        Err(EvalError::BadThreshold(theta))
    }
}

fn recall_of(errors: &[QueryError], theta_r: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    let hits = errors.iter().filter(|e| e.status == RelocStatus::Verified && e.error.is_some_and(|d| d <= theta_r)).count();
    hits as f64 / errors.len() as f64
}

fn mate_of(errors: &[QueryError]) -> Option<f64> {
    let verified: Vec<f64> = errors.iter().filter(|e| e.status == RelocStatus::Verified).filter_map(|e| e.error).collect();
    (!verified.is_empty()).then(|| 100.0 * verified.iter().sum::<f64>() / verified.len() as f64)
}

/// Fraction of queries with a verified pose within `theta_r` meters.
pub fn compute_recall(results: &[ResultRecord], truth: &[TimedPose], theta_r: f64) -> Result<f64, EvalError> {
    check_threshold(theta_r)?;
    Ok(recall_of(&query_errors(results, truth)?, theta_r))
}

/// Mean translation error of verified poses in centimeters; `None` when no
/// pose is verified. No alignment is applied.
pub fn compute_mate(results: &[ResultRecord], truth: &[TimedPose]) -> Result<Option<f64>, EvalError> {
    Ok(mate_of(&query_errors(results, truth)?))
}

/// One operating point of a precision-recall sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrSample {
    pub threshold: usize,
    pub accepted: usize,
    pub correct: usize,
    pub total: usize,
    /// `correct / accepted`, 1.0 when nothing is accepted.
    pub precision: f64,
    pub recall: f64,
}

fn sweep(results: &[ResultRecord], errors: &[QueryError], theta_r: f64, theta_dist: f64, pv: bool) -> Vec<PrSample> {
    let max_n_in = results.iter().map(|r| r.n_in).max().unwrap_or(0);
    let total = results.len();
    (0..=max_n_in)
        .map(|t| {
            let mut last = None;
            let (mut accepted, mut correct) = (0, 0);
            for (r, e) in results.iter().zip(errors) {
                let Some(pose) = r.pose else { continue };
                let ok = if pv {
                    let status = verify_pose(r.n_in, &pose, last.as_ref(), t, theta_dist);
                    if status != RelocStatus::Failed {
                        last = Some(pose);
                    }
                    status == RelocStatus::Verified
                } else {
                    r.n_in >= t
                };
                if ok {
                    accepted += 1;
                    if e.error.is_some_and(|d| d <= theta_r) {
                        correct += 1;
                    }
                }
            }
            let precision = if accepted == 0 { 1.0 } else { correct as f64 / accepted as f64 };
            let recall = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
            PrSample { threshold: t, accepted, correct, total, precision, recall }
        })
        .collect()
}

/// Sweeps the inlier threshold `t = 0..=max n_in`. A pose is accepted when
/// `n_in ≥ t`; with `pv` the verification gate is replayed in record order
/// with `θ_in = t` and `theta_dist`, and only verified poses are accepted.
/// Records should come from a run with `θ_in = 0` so that every pose is kept.
pub fn pr_sweep(results: &[ResultRecord], truth: &[TimedPose], theta_r: f64, theta_dist: f64, pv: bool) -> Result<Vec<PrSample>, EvalError> {
    check_threshold(theta_r)?;
    check_threshold(theta_dist)?;
    let errors = query_errors(results, truth)?;
    Ok(sweep(results, &errors, theta_r, theta_dist, pv))
}

/// Comparison of two PR curves at the recall levels both reach.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dominance {
    pub common_points: usize,
    /// Points where the first curve has lower precision.
    pub worse: usize,
    /// Points where the first curve has strictly higher precision.
    pub better: usize,
}

impl Dominance {
    pub fn weakly_dominates(&self) -> bool {
        self.common_points > 0 && self.worse == 0
    }

    pub fn strictly_somewhere(&self) -> bool {
        self.better > 0
    }
}

/// Interpolated precision: the best precision among samples recovering at
/// least `correct` poses.
fn interpolated(curve: &[PrSample], correct: usize) -> Option<f64> {
    curve.iter().filter(|s| s.accepted > 0 && s.correct >= correct).map(|s| s.precision).reduce(f64::max)
}

/// Compares `a` against `b` with interpolated precision at every nonzero
/// recall level sampled by either curve and reached by both.
pub fn compare_curves(a: &[PrSample], b: &[PrSample]) -> Dominance {
    let reach = |c: &[PrSample]| c.iter().filter(|s| s.accepted > 0).map(|s| s.correct).max().unwrap_or(0);
    let top = reach(a).min(reach(b));
    let mut levels: Vec<usize> = a.iter().chain(b).filter(|s| s.accepted > 0).map(|s| s.correct).filter(|&c| c > 0 && c <= top).collect();
    levels.sort_unstable();
    levels.dedup();
    let mut d = Dominance { common_points: 0, worse: 0, better: 0 };
    for c in levels {
        let (Some(x), Some(y)) = (interpolated(a, c), interpolated(b, c)) else { continue };
        d.common_points += 1;
        if x < y {
            d.worse += 1;
        } else if x > y {
            d.better += 1;
        }
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub theta_r: f64,
    pub queries: usize,
    pub verified: usize,
    pub recall: f64,
    /// Centimeters; `None` without verified poses.
    pub mate_cm: Option<f64>,
    pub per_query: Vec<QueryError>,
    pub pr_with_pv: Vec<PrSample>,
    pub pr_without_pv: Vec<PrSample>,
}

impl EvalReport {
    pub fn new(results: &[ResultRecord], truth: &[TimedPose], theta_r: f64, theta_dist: f64) -> Result<Self, EvalError> {
        check_threshold(theta_r)?;
        check_threshold(theta_dist)?;
        let per_query = query_errors(results, truth)?;
        Ok(Self {
            theta_r,
            queries: per_query.len(),
            verified: per_query.iter().filter(|e| e.status == RelocStatus::Verified).count(),
            recall: recall_of(&per_query, theta_r),
            mate_cm: mate_of(&per_query),
            pr_with_pv: sweep(results, &per_query, theta_r, theta_dist, true),
            pr_without_pv: sweep(results, &per_query, theta_r, theta_dist, false),
            per_query,
        })
    }

    /// One row per inlier threshold.
    pub fn write_pr_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,precision_pv,recall_pv,precision_no_pv,recall_no_pv")?;
        for (a, b) in self.pr_with_pv.iter().zip(&self.pr_without_pv) {
            writeln!(w, "{},{},{},{},{}", a.threshold, a.precision, a.recall, b.precision, b.recall)?;
        }
        Ok(())
    }

    /// Per-query errors, `nan` where no pose was reported.
    pub fn write_errors_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "timestamp,status,n_in,error_m")?;
        for q in &self.per_query {
            writeln!(w, "{},{},{},{}", q.timestamp, q.status.as_str(), q.n_in, q.error.unwrap_or(f64::NAN))?;
        }
        Ok(())
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "queries={}", self.queries)?;
        writeln!(f, "verified={}", self.verified)?;
        writeln!(f, "theta_r={}", self.theta_r)?;
        writeln!(f, "recall={}", self.recall)?;
        match self.mate_cm {
            Some(m) => write!(f, "mate_cm={m}"),
            None => write!(f, "mate_cm=none"),
        }
    }
}
