//! Run configuration: one TOML file, every section optional, unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use surfloc::database::{DatabaseConfig, GridMatchParams};
use surfloc::descriptor::MatchParams;
use surfloc::relocalizer::{LocalMode, RelocConfig};
use surfloc::simulator::{two_lane, Experiment, NoiseSpec, Preset, TrajectorySpec};
use surfloc::surfel_opt::OptimizerSettings;

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub preset: String,
    /// Directory holding every artifact of the run.
    pub dir: PathBuf,
    pub scene: SceneSection,
    pub trajectory: TrajectorySection,
    pub noise: NoiseSection,
    pub database: DatabaseSection,
    pub optimizer: OptimizerSection,
    pub relocalizer: RelocSection,
    pub eval: EvalSection,
}

/// Overrides of the preset scene; absent keys keep the preset value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub surfel_radius: Option<f64>,
    pub landmark_density: Option<f64>,
    pub copies: Option<u32>,
    pub copy_descriptor_flips: Option<u32>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrajectorySection {
    pub database_loops: Option<usize>,
    pub database_copies: Option<u32>,
    pub database_frames: Option<usize>,
    pub query_frames: Option<usize>,
    /// Query lane offset of the two-lane preset (m).
    pub lane_width: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    pub pixel_sigma: f64,
    pub descriptor_flips: u32,
    pub pose_sigma: f64,
    pub outlier_fraction: f64,
    pub dropout: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseSpec::default();
        Self { pixel_sigma: n.pixel_sigma, descriptor_flips: n.descriptor_flips, pose_sigma: n.pose_sigma, outlier_fraction: n.outlier_fraction, dropout: n.dropout }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatabaseSection {
    /// Re-matching window at octave 0 (px).
    pub window: f64,
    pub ratio: f64,
    pub max_distance: u32,
    pub vocabulary_size: usize,
    pub duplicate_fraction: f64,
    pub duplicate_min_observers: u32,
    pub recent_point_window: u64,
}

impl Default for DatabaseSection {
    fn default() -> Self {
        let c = DatabaseConfig::default();
        Self {
            window: c.grid.window,
            ratio: c.grid.descriptor.ratio,
            max_distance: c.grid.descriptor.max_distance,
            vocabulary_size: surfloc::pipeline::DEFAULT_VOCABULARY_SIZE,
            duplicate_fraction: c.duplicate_fraction,
            duplicate_min_observers: c.duplicate_min_observers,
            recent_point_window: c.recent_point_window,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub huber_delta: f64,
    pub max_iterations: usize,
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    pub outlier_rounds: usize,
    pub outlier_gate: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let s = OptimizerSettings::default();
        Self {
            huber_delta: s.huber_delta,
            max_iterations: s.max_iterations,
            relative_tolerance: s.relative_tolerance,
            initial_damping: s.initial_damping,
            outlier_rounds: s.outlier_rounds,
            outlier_gate: s.outlier_gate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RelocSection {
    pub top_k: usize,
    pub n_max: usize,
    pub n_co: usize,
    pub theta_in: usize,
    pub theta_dist: f64,
    pub window: f64,
    pub ratio: f64,
    pub max_distance: u32,
    pub use_essential: bool,
    /// `fn`, `f` or `naive`.
    pub mode: String,
}

impl Default for RelocSection {
    fn default() -> Self {
        let c = RelocConfig::default();
        Self {
            top_k: c.top_k,
            n_max: c.n_max,
            n_co: c.n_co,
            theta_in: c.theta_in,
            theta_dist: c.theta_dist,
            window: c.window,
            ratio: c.matching.ratio,
            max_distance: c.matching.max_distance,
            use_essential: c.use_essential,
            mode: c.mode.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub theta_r: f64,
    /// Gate: `eval` exits non-zero when recall falls below.
    pub min_recall: Option<f64>,
    /// Gate: `eval` exits non-zero when mATE (cm) exceeds, or is undefined.
    pub max_mate_cm: Option<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { theta_r: 0.3, min_recall: None, max_mate_cm: None }
    }
}

impl RunConfig {
    pub fn new() -> Self {
        Self { seed: 42, preset: Preset::Room.to_string(), dir: PathBuf::from("run"), ..Default::default() }
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let base = Self::new();
        if cfg.preset.is_empty() {
            cfg.preset = base.preset;
        }
        if cfg.dir.as_os_str().is_empty() {
            cfg.dir = base.dir;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The configuration without the run directory, for digests that must
    /// not depend on where a run is stored.
    pub fn portable_toml(&self) -> String {
        Self { dir: PathBuf::new(), ..self.clone() }.to_toml()
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.preset()?;
        self.mode()?;
        self.reloc_config().validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.experiment()?.noise.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.eval.theta_r > 0.0) {
            return Err(CliError::Config("eval.theta_r must be positive".into()));
        }
        if self.database.vocabulary_size == 0 || !(self.database.window > 0.0) {
            return Err(CliError::Config("database.vocabulary_size and database.window must be positive".into()));
        }
        Ok(())
    }

    pub fn preset(&self) -> Result<Preset, CliError> {
        self.preset.parse().map_err(|e: surfloc::simulator::SimError| CliError::Config(e.to_string()))
    }

    pub fn mode(&self) -> Result<LocalMode, CliError> {
        self.relocalizer.mode.parse().map_err(|e: String| CliError::Config(e))
    }

    /// The preset experiment with every configured override applied.
    pub fn experiment(&self) -> Result<Experiment, CliError> {
        let preset = self.preset()?;
        let mut exp = match (preset, self.trajectory.lane_width) {
            (Preset::TwoLane, Some(w)) => two_lane(self.seed, w),
            (_, Some(_)) => return Err(CliError::Config("trajectory.lane_width applies to the two-lane preset only".into())),
            _ => preset.experiment(self.seed),
        };
        let s = &self.scene;
        if let Some(v) = s.surfel_radius {
            exp.scene.surfel_radius = v;
        }
        if let Some(v) = s.landmark_density {
            exp.scene.landmark_density = v;
        }
        if let Some(v) = s.copies {
            exp.scene.copies = v;
        }
        if let Some(v) = s.copy_descriptor_flips {
            exp.scene.copy_descriptor_flips = v;
        }
        let t = &self.trajectory;
        if let Some(v) = t.database_loops {
            exp.database_loops = v;
        }
        if let Some(v) = t.database_copies {
            exp.database_copies = v;
        }
        if let Some(n) = t.database_frames {
            set_frames(&mut exp.database, n)?;
        }
        if let Some(n) = t.query_frames {
            set_frames(&mut exp.query, n)?;
        }
        let n = &self.noise;
        exp.noise = NoiseSpec {
            pixel_sigma: n.pixel_sigma,
            descriptor_flips: n.descriptor_flips,
            pose_sigma: n.pose_sigma,
            outlier_fraction: n.outlier_fraction,
            dropout: n.dropout,
        };
        Ok(exp)
    }

    pub fn database_config(&self) -> DatabaseConfig {
        let d = &self.database;
        DatabaseConfig {
            grid: GridMatchParams { window: d.window, descriptor: MatchParams { ratio: d.ratio, max_distance: d.max_distance } },
            duplicate_fraction: d.duplicate_fraction,
            duplicate_min_observers: d.duplicate_min_observers,
            recent_point_window: d.recent_point_window,
        }
    }

    pub fn optimizer_settings(&self) -> OptimizerSettings {
        let o = &self.optimizer;
        OptimizerSettings {
            huber_delta: o.huber_delta,
            max_iterations: o.max_iterations,
            relative_tolerance: o.relative_tolerance,
            initial_damping: o.initial_damping,
            outlier_rounds: o.outlier_rounds,
            outlier_gate: o.outlier_gate,
        }
    }

    pub fn reloc_config(&self) -> RelocConfig {
        let r = &self.relocalizer;
        RelocConfig {
            top_k: r.top_k,
            n_max: r.n_max,
            n_co: r.n_co,
            theta_in: r.theta_in,
            theta_dist: r.theta_dist,
            window: r.window,
            matching: MatchParams { ratio: r.ratio, max_distance: r.max_distance },
            use_essential: r.use_essential,
            mode: self.mode().unwrap_or_default(),
            seed: self.seed,
            ..RelocConfig::default()
        }
    }
}

fn set_frames(spec: &mut TrajectorySpec, n: usize) -> Result<(), CliError> {
    match spec {
        TrajectorySpec::Circle { frames_per_loop, .. } => *frames_per_loop = n,
        TrajectorySpec::Line { frames, .. } => *frames = n,
        TrajectorySpec::Lawnmower { .. } => return Err(CliError::Config("frame count is set by the lawnmower step".into())),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg.preset, "room");
        assert_eq!(cfg.reloc_config(), RelocConfig { seed: cfg.seed, ..RelocConfig::default() });
        assert_eq!(cfg.database_config(), DatabaseConfig::default());
        assert_eq!(cfg.optimizer_settings(), OptimizerSettings::default());
        assert_eq!(cfg.experiment().unwrap(), Preset::Room.experiment(cfg.seed));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(RunConfig::parse("sed = 1"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[noise]\nsigma = 1.0"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("[cameras]"), Err(CliError::Config(_))));
    }

    #[test]
    fn invalid_values_are_rejected() {
        for bad in ["preset = \"street\"", "[relocalizer]\nmode = \"x\"", "[relocalizer]\ntop_k = 0", "[noise]\ndropout = 1.5", "[eval]\ntheta_r = 0.0"] {
            assert!(RunConfig::parse(bad).is_err(), "{bad}");
        }
        assert!(RunConfig::parse("[trajectory]\nlane_width = 2.0").is_err());
    }

    #[test]
    fn overrides_reach_the_experiment() {
        let cfg = RunConfig::parse(
            "seed = 7\npreset = \"corridor\"\n[scene]\nlandmark_density = 3.0\n[trajectory]\nquery_frames = 12\n[noise]\npose_sigma = 0.2\n[relocalizer]\nmode = \"naive\"",
        )
        .unwrap();
        let exp = cfg.experiment().unwrap();
        assert_eq!(exp.seed, 7);
        assert_eq!(exp.scene.landmark_density, 3.0);
        assert_eq!(exp.noise.pose_sigma, 0.2);
        assert!(matches!(exp.query, TrajectorySpec::Line { frames: 12, .. }));
        assert_eq!(cfg.reloc_config().mode, LocalMode::Naive);
    }

    #[test]
    fn serialized_config_parses_back() {
        let mut cfg = RunConfig::new();
        cfg.eval.min_recall = Some(0.9);
        cfg.trajectory.database_loops = Some(2);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }
}
