//! The five pipeline stages. Each reads and writes files under the run directory.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{debug, info, warn};
use surfloc::database::{FrameReport, FrameStatus, VisualDatabase};
use surfloc::descriptor::{GlobalBackend, LocalFeatures};
use surfloc::evaluation::EvalReport;
use surfloc::geometry::{read_trajectory, write_trajectory, TimedPose};
use surfloc::pipeline::{build_database, insert_frames};
use surfloc::relocalizer::{read_records, relocalize as relocalize_query, write_records, PoseVerifier, ResultRecord};
use surfloc::simulator::{simulate as run_simulation, GroundTruth, ObservationFile};
use surfloc::surfel_map::SurfelMap;
use surfloc::surfel_opt::{optimize_poses, refresh_map_points, OptimizationReport, OptimizationStatus, OptimizeError};

use crate::manifest::Manifest;
use crate::{CliError, RunConfig};

/// Artifact locations of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub dir: PathBuf,
    pub map: PathBuf,
    pub db_observations: PathBuf,
    /// Mapping poses as handed to the builder (noisy when pose noise is set).
    pub db_poses: PathBuf,
    pub db_truth: PathBuf,
    pub db_ground_truth: PathBuf,
    pub query_observations: PathBuf,
    pub query_truth: PathBuf,
    pub query_ground_truth: PathBuf,
    pub database: PathBuf,
    pub build_report: PathBuf,
    pub optimize_report: PathBuf,
    pub optimize_costs: PathBuf,
    pub results: PathBuf,
    pub summary: PathBuf,
    pub pr_csv: PathBuf,
    pub errors_csv: PathBuf,
}

impl Paths {
    pub fn in_dir(dir: impl Into<PathBuf>) -> Self {
        let dir = dir.into();
        let f = |name: &str| dir.join(name);
        Self {
            map: f("map.srfl"),
            db_observations: f("database.obsv"),
            db_poses: f("database_poses.txt"),
            db_truth: f("database_truth.txt"),
            db_ground_truth: f("database.gtru"),
            query_observations: f("query.obsv"),
            query_truth: f("query_truth.txt"),
            query_ground_truth: f("query.gtru"),
            database: f("database.vsdb"),
            build_report: f("build_report.txt"),
            optimize_report: f("optimize_report.txt"),
            optimize_costs: f("optimize_costs.csv"),
            results: f("results.txt"),
            summary: f("eval_summary.txt"),
            pr_csv: f("pr.csv"),
            errors_csv: f("errors.csv"),
            dir,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<(), CliError> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| CliError::io(path, e))
}

fn read_poses(path: &Path) -> Result<Vec<TimedPose>, CliError> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(read_trajectory(BufReader::new(file))?)
}

fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Generates the scene, trajectories and observations of the configured experiment.
pub fn simulate(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<Manifest, CliError> {
    let outputs = [
        &paths.map,
        &paths.db_observations,
        &paths.db_poses,
        &paths.db_truth,
        &paths.db_ground_truth,
        &paths.query_observations,
        &paths.query_truth,
        &paths.query_ground_truth,
    ];
    if !force {
        if let Some(p) = outputs.iter().find(|p| p.exists()) {
            return Err(CliError::Exists(p.to_path_buf()));
        }
    }
    let exp = cfg.experiment()?;
    let run = run_simulation(&exp)?;
    ensure_dir(&paths.dir)?;
    run.scene.map.save(&paths.map)?;
    ObservationFile::from_frames(run.camera, &run.database).save(&paths.db_observations)?;
    ObservationFile::from_frames(run.camera, &run.query).save(&paths.query_observations)?;
    GroundTruth::new(&run.scene, &run.database).save(&paths.db_ground_truth)?;
    GroundTruth::new(&run.scene, &run.query).save(&paths.query_ground_truth)?;
    write_with(&paths.db_poses, |w| write_trajectory(w, &run.database_poses))?;
    write_with(&paths.db_truth, |w| write_trajectory(w, &run.database_truth()))?;
    write_with(&paths.query_truth, |w| write_trajectory(w, &run.query_truth()))?;
    info!(
        "simulated {} surfels, {} landmarks, {} database and {} query frames",
        run.scene.map.len(),
        run.scene.landmarks.len(),
        run.database.len(),
        run.query.len()
    );
    let mut m = Manifest::new("simulate", cfg);
    for p in outputs {
        m.output(p)?;
    }
    m.save(&paths.dir, cfg)?;
    Ok(m)
}

#[derive(Clone, Debug)]
pub struct BuildOutcome {
    /// An existing database was extended rather than rebuilt.
    pub updated: bool,
    pub reports: Vec<FrameReport>,
    pub keyframes: usize,
    pub map_points: usize,
}

/// Feeds the mapping sequence into the database. An existing database file
/// is extended (keyframe ids continue) unless `force` asks for a rebuild.
pub fn build_db(cfg: &RunConfig, paths: &Paths, force: bool) -> Result<BuildOutcome, CliError> {
    let map = SurfelMap::load(&paths.map)?;
    let obs = ObservationFile::load(&paths.db_observations)?;
    let poses = read_poses(&paths.db_poses)?;
    if obs.frames.is_empty() {
        return Err(CliError::Input(format!("{} holds no frames", paths.db_observations.display())));
    }
    if obs.frames.len() != poses.len() {
        return Err(CliError::Input(format!("{} frames but {} poses", obs.frames.len(), poses.len())));
    }
    if let Some(i) = obs.frames.iter().zip(&poses).position(|((ts, _), p)| ts.to_bits() != p.timestamp.to_bits()) {
        return Err(CliError::Input(format!("frame {i}: observation timestamp {} has pose timestamp {}", obs.frames[i].0, poses[i].timestamp)));
    }
    let frames: Vec<LocalFeatures> = obs.frames.into_iter().map(|(_, f)| f).collect();
    let updated = paths.database.exists() && !force;
    let (db, reports) = if updated {
        let mut db = VisualDatabase::load(&paths.database)?;
        if *db.camera() != obs.camera {
            return Err(CliError::Input("observation camera differs from the database camera".into()));
        }
        let mut reports = Vec::with_capacity(frames.len());
        insert_frames(&mut db, &map, frames.iter().zip(&poses), |_, r| {
            reports.push(r.clone());
            Ok(())
        })?;
        (db, reports)
    } else {
        build_database(obs.camera, &map, &frames, &poses, cfg.database.vocabulary_size, GlobalBackend::Vlad, cfg.database_config(), cfg.seed)?
    };
    db.check_integrity()?;
    ensure_dir(&paths.dir)?;
    db.save(&paths.database)?;
    let count = |s: FrameStatus| reports.iter().filter(|r| r.status == s).count();
    let summary = format!(
        "mode={}\nframes={}\ninserted={}\nduplicate={}\nrejected={}\nkeyframes={}\nmap_points={}\ncovisibility_edges={}\n",
        if updated { "update" } else { "build" },
        reports.len(),
        count(FrameStatus::Inserted),
        count(FrameStatus::Duplicate),
        count(FrameStatus::Rejected),
        db.keyframes().len(),
        db.map_points().len(),
        db.covisibility().edge_count()
    );
    write_with(&paths.build_report, |w| {
        w.write_all(summary.as_bytes())?;
        reports.iter().try_for_each(|r| writeln!(w, "{r}"))
    })?;
    info!("{}", summary.trim_end().replace('\n', " "));
    let mut m = Manifest::new("build-db", cfg);
    m.input(&paths.map)?;
    m.input(&paths.db_observations)?;
    m.input(&paths.db_poses)?;
    m.output(&paths.database)?;
    m.output(&paths.build_report)?;
    m.save(&paths.dir, cfg)?;
    Ok(BuildOutcome { updated, keyframes: db.keyframes().len(), map_points: db.map_points().len(), reports })
}

/// Runs surfel reprojection optimization and refreshes map points. A
/// database without co-observed points is left untouched.
pub fn optimize_db(cfg: &RunConfig, paths: &Paths) -> Result<Option<OptimizationReport>, CliError> {
    let map = SurfelMap::load(&paths.map)?;
    let mut db = VisualDatabase::load(&paths.database)?;
    let report = match optimize_poses(&mut db, &map, &cfg.optimizer_settings()) {
        Ok(r) if r.status != OptimizationStatus::NoFactors => r,
        outcome => {
            let reason = match outcome {
                Err(OptimizeError::NotEnoughKeyframes) => "no two keyframes share a map point",
                _ => "no surfel reprojection factor could be formed",
            };
            warn!("optimization skipped: {reason}");
            std::fs::write(&paths.optimize_report, format!("status=no_op\nreason={}\n", reason.replace(' ', "_")))
                .map_err(|e| CliError::io(&paths.optimize_report, e))?;
            return Ok(None);
        }
    };
    let refresh = refresh_map_points(&mut db, &map);
    db.check_integrity()?;
    db.save(&paths.database)?;
    write_with(&paths.optimize_report, |w| writeln!(w, "{report}\nrefreshed_points={}\ndegenerate_points={}", refresh.updated, refresh.degenerate))?;
    write_with(&paths.optimize_costs, |w| report.write_cost_csv(w))?;
    info!("optimization {}: cost {} -> {}", report.status.as_str(), report.initial_cost, report.final_cost);
    let mut m = Manifest::new("optimize-db", cfg);
    m.input(&paths.map)?;
    m.output(&paths.database)?;
    m.output(&paths.optimize_report)?;
    m.save(&paths.dir, cfg)?;
    Ok(Some(report))
}

/// Relocalizes every query frame in order, threading the last inlier pose.
pub fn relocalize(cfg: &RunConfig, paths: &Paths) -> Result<Vec<ResultRecord>, CliError> {
    let map = SurfelMap::load(&paths.map)?;
    let db = VisualDatabase::load(&paths.database)?;
    if db.vocabulary().is_empty() {
        return Err(CliError::Input("database carries no vocabulary".into()));
    }
    let obs = ObservationFile::load(&paths.query_observations)?;
    if obs.camera != *db.camera() {
        warn!("query camera differs from the database camera; using the database camera");
    }
    let reloc = cfg.reloc_config();
    let mut verifier = PoseVerifier::default();
    let mut records = Vec::with_capacity(obs.frames.len());
    let start = Instant::now();
    for (ts, local) in obs.frames {
        let features = db.describe(local)?;
        let r = relocalize_query(&db, &map, ts, &features, &reloc, &mut verifier)?;
        debug!("{}", r.record());
        records.push(r.record());
    }
    if !records.is_empty() {
        info!("{} queries, {:.1} ms per query", records.len(), start.elapsed().as_secs_f64() * 1e3 / records.len() as f64);
    }
    write_with(&paths.results, |w| write_records(w, &records))?;
    let mut m = Manifest::new("relocalize", cfg);
    m.input(&paths.database)?;
    m.input(&paths.query_observations)?;
    m.output(&paths.results)?;
    m.save(&paths.dir, cfg)?;
    Ok(records)
}

#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub report: EvalReport,
    /// Violated gates; empty iff the run passes.
    pub failures: Vec<String>,
}

impl EvalOutcome {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Scores the result records against the query ground truth and applies the configured gates.
pub fn eval(cfg: &RunConfig, paths: &Paths) -> Result<EvalOutcome, CliError> {
    let file = File::open(&paths.results).map_err(|e| CliError::io(&paths.results, e))?;
    let records = read_records(BufReader::new(file))?;
    let truth = read_poses(&paths.query_truth)?;
    let report = EvalReport::new(&records, &truth, cfg.eval.theta_r, cfg.relocalizer.theta_dist)?;
    let mut failures = Vec::new();
    if let Some(min) = cfg.eval.min_recall {
        if report.recall < min {
            failures.push(format!("recall {} below {min}", report.recall));
        }
    }
    if let Some(max) = cfg.eval.max_mate_cm {
        match report.mate_cm {
            Some(m) if m <= max => {}
            Some(m) => failures.push(format!("mate_cm {m} above {max}")),
            None => failures.push("mate_cm undefined".into()),
        }
    }
    write_with(&paths.summary, |w| {
        writeln!(w, "{report}")?;
        writeln!(w, "gates={}", if failures.is_empty() { "pass" } else { "fail" })
    })?;
    write_with(&paths.pr_csv, |w| report.write_pr_csv(w))?;
    write_with(&paths.errors_csv, |w| report.write_errors_csv(w))?;
    let mut m = Manifest::new("eval", cfg);
    m.input(&paths.results)?;
    m.input(&paths.query_truth)?;
    m.output(&paths.summary)?;
    m.output(&paths.pr_csv)?;
    m.save(&paths.dir, cfg)?;
    Ok(EvalOutcome { report, failures })
}
