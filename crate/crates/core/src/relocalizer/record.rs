//! Line-oriented result records.
//!
//! ```text
//! <ts> <verified|unverified> tx ty tz qx qy qz qw <n_in> <clusters>
//! <ts> failed <n_in> <clusters> <reason>
//! ```

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use thiserror::Error;

use crate::geometry::Pose;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum RelocStatus {
    Verified,
    /// Enough inliers, but too far from the last inlier pose.
    Unverified,
    Failed,
}

impl RelocStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            RelocStatus::Verified => "verified",
            RelocStatus::Unverified => "unverified",
            RelocStatus::Failed => "failed",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub timestamp: f64,
    pub status: RelocStatus,
    /// Present iff the status is not `Failed`.
    pub pose: Option<Pose>,
    pub n_in: usize,
    pub cluster_count: usize,
    /// Failure reason, a single token.
    pub reason: Option<String>,
}

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl fmt::Display for ResultRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.pose {
            Some(pose) if self.status != RelocStatus::Failed => {
                let t = pose.translation();
                let q = pose.rotation().coords;
                write!(
                    f,
                    "{} {} {} {} {} {} {} {} {} {} {}",
                    self.timestamp,
                    self.status.as_str(),
                    t.x,
                    t.y,
                    t.z,
                    q.x,
                    q.y,
                    q.z,
                    q.w,
                    self.n_in,
                    self.cluster_count
                )
            }
            _ => write!(
                f,
                "{} failed {} {} {}",
                self.timestamp,
                self.n_in,
                self.cluster_count,
                self.reason.as_deref().unwrap_or("unknown")
            ),
        }
    }
}

impl FromStr for ResultRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let tok: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<f64, String> { tok[i].parse::<f64>().map_err(|e| format!("field {}: {e}", i + 1)) };
        let int = |i: usize| -> Result<usize, String> { tok[i].parse::<usize>().map_err(|e| format!("field {}: {e}", i + 1)) };
        if tok.len() < 2 {
            return Err("too few fields".into());
        }
        let timestamp = num(0)?;
        match tok[1] {
            "failed" => {
                if tok.len() != 5 {
                    return Err(format!("failure record needs 5 fields, found {}", tok.len()));
                }
                Ok(Self { timestamp, status: RelocStatus::Failed, pose: None, n_in: int(2)?, cluster_count: int(3)?, reason: Some(tok[4].to_string()) })
            }
            "verified" | "unverified" => {
                if tok.len() != 11 {
                    return Err(format!("pose record needs 11 fields, found {}", tok.len()));
                }
                let t = [num(2)?, num(3)?, num(4)?];
                let q = [num(5)?, num(6)?, num(7)?, num(8)?];
                let pose = Pose::from_components(t, q).ok_or("invalid pose")?;
                let status = if tok[1] == "verified" { RelocStatus::Verified } else { RelocStatus::Unverified };
                Ok(Self { timestamp, status, pose: Some(pose), n_in: int(9)?, cluster_count: int(10)?, reason: None })
            }
            other => Err(format!("unknown status {other:?}")),
        }
    }
}

pub fn write_records<W: Write>(mut w: W, records: &[ResultRecord]) -> std::io::Result<()> {
    for r in records {
        writeln!(w, "{r}")?;
    }
    Ok(())
}

/// Parses records, skipping blank lines and `#` comments.
pub fn read_records<R: BufRead>(r: R) -> Result<Vec<ResultRecord>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        out.push(t.parse().map_err(|msg| RecordError::Parse { line: i + 1, msg })?);
    }
    Ok(out)
}
