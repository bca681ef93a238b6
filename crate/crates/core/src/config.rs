//! Flat `key = value` pipeline configuration. Every key has a default;
//! unknown keys are rejected.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::gmm::GmmParams;
use crate::mesh::{FilterParams, METRIC_THRESHOLD};
use crate::pointcloud::colorize::NORMAL_NEIGHBORS;
use crate::pointcloud::ColorizeParams;
use crate::scene::SceneSpec;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("{path}:{line}: expected `key = value`")]
    Syntax { path: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Room,
    Corner,
}

impl FromStr for SceneKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "room" => Ok(Self::Room),
            "corner" => Ok(Self::Corner),
            _ => Err("expected `room` or `corner`".into()),
        }
    }
}

impl Display for SceneKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Room => "room",
            Self::Corner => "corner",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// One surfel per GMM component.
    Gmm,
    /// A random subset of the colorized LiDAR points.
    Random,
}

impl FromStr for InitMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "gmm" => Ok(Self::Gmm),
            "random" => Ok(Self::Random),
            _ => Err("expected `gmm` or `random`".into()),
        }
    }
}

impl Display for InitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Gmm => "gmm",
            Self::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,

    pub scene_kind: SceneKind,
    pub scene_image_size: usize,
    /// `None` keeps the preset density.
    pub scene_lidar_density: Option<f64>,
    pub scene_noise_sigma: f64,

    pub colorize: ColorizeParams,
    pub normal_neighbors: usize,
    pub gmm: GmmParams,

    pub init_mode: InitMode,
    /// Surfels for random initialization; `None` matches the GMM component count.
    pub init_count: Option<usize>,

    pub train: TrainConfig,
    pub filter: FilterParams,
    pub metric_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data_dir: PathBuf::from("data"),
            out_dir: PathBuf::from("out"),
            scene_kind: SceneKind::Room,
            scene_image_size: 192,
            scene_lidar_density: None,
            scene_noise_sigma: 0.0,
            colorize: ColorizeParams::default(),
            normal_neighbors: NORMAL_NEIGHBORS,
            gmm: GmmParams::default(),
            init_mode: InitMode::Gmm,
            init_count: None,
            train: TrainConfig::default(),
            filter: FilterParams::default(),
            metric_threshold: METRIC_THRESHOLD,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.into(),
        value: value.into(),
        reason: e.to_string(),
    })
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if value == "auto" || value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

fn show_opt<T: Display>(v: &Option<T>, none: &str) -> String {
    v.as_ref().map_or_else(|| none.to_string(), T::to_string)
}

impl PipelineConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let g = &self.gmm;
        let d = &t.density;
        let s = &t.supervision;
        vec![
            ("seed", self.seed.to_string()),
            ("data_dir", self.data_dir.display().to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("scene.kind", self.scene_kind.to_string()),
            ("scene.image_size", self.scene_image_size.to_string()),
            ("scene.lidar_density", show_opt(&self.scene_lidar_density, "auto")),
            ("scene.noise_sigma", self.scene_noise_sigma.to_string()),
            ("colorize.depth_tolerance", self.colorize.depth_tolerance.to_string()),
            ("lidar.normal_neighbors", self.normal_neighbors.to_string()),
            ("gmm.voxel_size", g.voxel_size.to_string()),
            ("gmm.ransac_threshold", g.ransac.threshold.to_string()),
            ("gmm.ransac_iterations", g.ransac.iterations.to_string()),
            ("gmm.ransac_min_inliers", g.ransac.min_inliers.to_string()),
            ("gmm.max_planes", g.ransac.max_planes.to_string()),
            ("gmm.bandwidth_spatial_frac", g.bandwidth_spatial_frac.to_string()),
            ("gmm.bandwidth_gray", g.bandwidth_gray.to_string()),
            ("gmm.min_mode_support", g.min_mode_support.to_string()),
            ("gmm.em_tol", g.em_tol.to_string()),
            ("gmm.max_em_iters", g.max_em_iters.to_string()),
            ("gmm.eps_cov", g.eps_cov.to_string()),
            ("gmm.rho", g.rho.to_string()),
            ("init.mode", self.init_mode.to_string()),
            ("init.count", show_opt(&self.init_count, "auto")),
            ("train.iterations", t.iterations.to_string()),
            ("train.sh_degree", t.sh_degree.to_string()),
            ("train.refresh_every", t.refresh_every.to_string()),
            ("train.test_stride", t.test_stride.to_string()),
            ("train.checkpoint_every", t.checkpoint_every.to_string()),
            ("lr.position_init", t.lr.position_init.to_string()),
            ("lr.position_final", t.lr.position_final.to_string()),
            ("lr.opacity", t.lr.opacity.to_string()),
            ("lr.radii", t.lr.radii.to_string()),
            ("lr.rotation", t.lr.rotation.to_string()),
            ("lr.sh", t.lr.sh.to_string()),
            ("lambda_gmm", t.loss.gmm.to_string()),
            ("lambda_d", t.loss.depth.to_string()),
            ("lambda_n", t.loss.normal.to_string()),
            ("supervision.k", s.k.to_string()),
            ("supervision.sigma", s.sigma.to_string()),
            ("supervision.alpha", s.alpha.to_string()),
            ("supervision.phi", s.phi.to_string()),
            ("supervision.max_radius", show_opt(&s.max_radius, "none")),
            ("density.enabled", t.density_enabled.to_string()),
            ("density.tau", d.tau.to_string()),
            ("density.omega_growth", d.growth_weight.to_string()),
            ("density.omega_scale", d.scale_weight.to_string()),
            ("density.omega_pruning", d.prune_weight.to_string()),
            ("density.growth_threshold", d.growth_threshold.to_string()),
            ("density.prune_threshold", d.prune_threshold.to_string()),
            ("density.split_size", d.split_size.to_string()),
            ("density.interval", d.interval.to_string()),
            ("density.start_iter", d.start_iter.to_string()),
            ("density.stop_iter", d.stop_iter.to_string()),
            ("filter.occupancy_voxel", self.filter.occupancy_voxel.to_string()),
            ("filter.occupancy_min_points", self.filter.occupancy_min_points.to_string()),
            ("filter.fine_threshold", self.filter.fine_threshold.to_string()),
            ("eval.threshold", self.metric_threshold.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let t = &mut self.train;
        let g = &mut self.gmm;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data_dir" => self.data_dir = PathBuf::from(v),
            "out_dir" => self.out_dir = PathBuf::from(v),
            "scene.kind" => self.scene_kind = parse(key, v)?,
            "scene.image_size" => self.scene_image_size = parse(key, v)?,
            "scene.lidar_density" => self.scene_lidar_density = parse_opt(key, v)?,
            "scene.noise_sigma" => self.scene_noise_sigma = parse(key, v)?,
            "colorize.depth_tolerance" => self.colorize.depth_tolerance = parse(key, v)?,
            "lidar.normal_neighbors" => self.normal_neighbors = parse(key, v)?,
            "gmm.voxel_size" => g.voxel_size = parse(key, v)?,
            "gmm.ransac_threshold" => g.ransac.threshold = parse(key, v)?,
            "gmm.ransac_iterations" => g.ransac.iterations = parse(key, v)?,
            "gmm.ransac_min_inliers" => g.ransac.min_inliers = parse(key, v)?,
            "gmm.max_planes" => g.ransac.max_planes = parse(key, v)?,
            "gmm.bandwidth_spatial_frac" => g.bandwidth_spatial_frac = parse(key, v)?,
            "gmm.bandwidth_gray" => g.bandwidth_gray = parse(key, v)?,
            "gmm.min_mode_support" => g.min_mode_support = parse(key, v)?,
            "gmm.em_tol" => g.em_tol = parse(key, v)?,
            "gmm.max_em_iters" => g.max_em_iters = parse(key, v)?,
            "gmm.eps_cov" => g.eps_cov = parse(key, v)?,
            "gmm.rho" => g.rho = parse(key, v)?,
            "init.mode" => self.init_mode = parse(key, v)?,
            "init.count" => self.init_count = parse_opt(key, v)?,
            "train.iterations" => t.iterations = parse(key, v)?,
            "train.sh_degree" => t.sh_degree = parse(key, v)?,
            "train.refresh_every" => t.refresh_every = parse(key, v)?,
            "train.test_stride" => t.test_stride = parse(key, v)?,
            "train.checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "lr.position_init" => t.lr.position_init = parse(key, v)?,
            "lr.position_final" => t.lr.position_final = parse(key, v)?,
            "lr.opacity" => t.lr.opacity = parse(key, v)?,
            "lr.radii" => t.lr.radii = parse(key, v)?,
            "lr.rotation" => t.lr.rotation = parse(key, v)?,
            "lr.sh" => t.lr.sh = parse(key, v)?,
            "lambda_gmm" => t.loss.gmm = parse(key, v)?,
            "lambda_d" => t.loss.depth = parse(key, v)?,
            "lambda_n" => t.loss.normal = parse(key, v)?,
            "supervision.k" => t.supervision.k = parse(key, v)?,
            "supervision.sigma" => t.supervision.sigma = parse(key, v)?,
            "supervision.alpha" => t.supervision.alpha = parse(key, v)?,
            "supervision.phi" => t.supervision.phi = parse(key, v)?,
            "supervision.max_radius" => t.supervision.max_radius = parse_opt(key, v)?,
            "density.enabled" => t.density_enabled = parse(key, v)?,
            "density.tau" => t.density.tau = parse(key, v)?,
            "density.omega_growth" => t.density.growth_weight = parse(key, v)?,
            "density.omega_scale" => t.density.scale_weight = parse(key, v)?,
            "density.omega_pruning" => t.density.prune_weight = parse(key, v)?,
            "density.growth_threshold" => t.density.growth_threshold = parse(key, v)?,
            "density.prune_threshold" => t.density.prune_threshold = parse(key, v)?,
            "density.split_size" => t.density.split_size = parse(key, v)?,
            "density.interval" => t.density.interval = parse(key, v)?,
            "density.start_iter" => t.density.start_iter = parse(key, v)?,
            "density.stop_iter" => t.density.stop_iter = parse(key, v)?,
            "filter.occupancy_voxel" => self.filter.occupancy_voxel = parse(key, v)?,
            "filter.occupancy_min_points" => self.filter.occupancy_min_points = parse(key, v)?,
            "filter.fine_threshold" => self.filter.fine_threshold = parse(key, v)?,
            "eval.threshold" => self.metric_threshold = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                path: origin.to_path_buf(),
                line: i + 1,
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut c = Self::default();
        c.apply_text(&text, path)?;
        Ok(c)
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<(), ConfigError> {
        let (k, v) = kv.split_once('=').ok_or_else(|| ConfigError::BadValue {
            key: kv.into(),
            value: String::new(),
            reason: "override must be `key=value`".into(),
        })?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        self.entries().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn scene_spec(&self) -> SceneSpec {
        let mut spec = match self.scene_kind {
            SceneKind::Room => SceneSpec::room(self.scene_image_size),
            SceneKind::Corner => SceneSpec::corner(self.scene_image_size),
        };
        if let Some(d) = self.scene_lidar_density {
            spec.lidar_density = d;
        }
        spec.noise_sigma = self.scene_noise_sigma;
        spec.seed = self.seed;
        spec
    }

    pub fn gmm_params(&self) -> GmmParams {
        GmmParams {
            seed: self.seed,
            ..self.gmm
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.scene_spec().validate()?;
        self.train_config().validate()?;
        if !(self.gmm.voxel_size > 0.0) {
            return Err("gmm voxel size must be positive".into());
        }
        if !(self.filter.occupancy_voxel > 0.0 && self.filter.fine_threshold > 0.0) {
            return Err("filter voxel and threshold must be positive".into());
        }
        if !(self.metric_threshold > 0.0) {
            return Err("metric threshold must be positive".into());
        }
        Ok(())
    }
}
