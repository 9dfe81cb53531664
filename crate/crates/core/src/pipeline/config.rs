//! Flat `key = value` configuration covering every tunable constant of the
//! pipeline. Files are parsed as TOML, so comments and quoting follow TOML.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crf::MeanFieldConfig;
use crate::error::{Error, Result};
use crate::mesh::{DEFAULT_GEODESIC_CUTOFF, DEFAULT_SAMPLE_COUNT};
use crate::render::{Phong, RenderConfig};
use crate::train::{TrainConfig, TrainMode};
use crate::view_select::{SelectConfig, DEFAULT_MAX_PER_SCALE};

/// Name of the effective-config echo written into every output directory.
pub const CONFIG_ECHO: &str = "config.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    /// Fraction of generated shapes assigned to the training split.
    pub train_fraction: f64,

    pub sample_points: usize,
    pub coverage_target: f64,
    pub max_views_per_scale: usize,
    pub fixed_views: bool,

    pub width: usize,
    pub height: usize,
    pub fov_degrees: f64,
    pub near_factor: f64,
    pub far_factor: f64,
    pub silhouette_radius: usize,
    pub silhouette_depth_jump: f32,
    pub upright_height: bool,
    pub input_noise: f32,
    pub phong_ambient: f64,
    pub phong_diffuse: f64,
    pub phong_specular: f64,
    pub phong_shininess: i32,

    pub geodesic_cutoff: f64,

    pub mode: TrainMode,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub views_per_step: usize,
    pub clip_norm: f64,
    pub crf_max_weight: f64,
    pub epochs: usize,
    pub crf_epochs: usize,

    pub mf_iterations: usize,
    pub mf_tolerance: f64,
    pub mf_damping: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let render = RenderConfig::default();
        let train = TrainConfig::default();
        let mf = MeanFieldConfig::default();
        let select = SelectConfig::default();
        PipelineConfig {
            seed: 0,
            train_fraction: 0.5,
            sample_points: DEFAULT_SAMPLE_COUNT,
            coverage_target: select.coverage_target,
            max_views_per_scale: DEFAULT_MAX_PER_SCALE,
            fixed_views: false,
            width: render.width,
            height: render.height,
            fov_degrees: render.fov_y.to_degrees(),
            near_factor: render.near_factor,
            far_factor: render.far_factor,
            silhouette_radius: render.silhouette_radius,
            silhouette_depth_jump: render.silhouette_depth_jump,
            upright_height: render.upright_height,
            input_noise: render.input_noise,
            phong_ambient: render.phong.ambient,
            phong_diffuse: render.phong.diffuse,
            phong_specular: render.phong.specular,
            phong_shininess: render.phong.shininess,
            geodesic_cutoff: DEFAULT_GEODESIC_CUTOFF,
            mode: train.mode,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            weight_decay: train.weight_decay,
            views_per_step: train.views_per_step,
            clip_norm: train.clip_norm,
            crf_max_weight: train.crf_max_weight,
            epochs: train.epochs,
            crf_epochs: train.crf_epochs,
            mf_iterations: mf.max_iterations,
            mf_tolerance: mf.tolerance,
            mf_damping: mf.damping,
        }
    }
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<PipelineConfig> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        PipelineConfig::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::parse(path, m),
            other => other,
        })
    }

    /// `key = value` lines in field order.
    pub fn to_text(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    /// Writes the effective configuration into `dir`.
    pub fn echo(&self, dir: impl AsRef<Path>) -> Result<()> {
        let path = dir.as_ref().join(CONFIG_ECHO);
        fs::write(&path, self.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.height == 0 || self.width % 8 != 0 || self.height % 8 != 0 {
            return bad("render resolution must be a positive multiple of 8");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad("train_fraction must lie in (0, 1]");
        }
        if self.sample_points == 0 {
            return bad("sample_points must be at least 1");
        }
        if !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return bad("coverage_target must lie in (0, 1]");
        }
        if self.max_views_per_scale == 0 {
            return bad("max_views_per_scale must be at least 1");
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return bad("fov_degrees must lie in (0, 180)");
        }
        if !(self.near_factor > 0.0 && self.far_factor > self.near_factor) {
            return bad("need 0 < near_factor < far_factor");
        }
        if !(self.input_noise >= 0.0 && self.input_noise.is_finite()) {
            return bad("input_noise must be nonnegative");
        }
        if !(self.geodesic_cutoff > 0.0 && self.geodesic_cutoff.is_finite()) {
            return bad("geodesic_cutoff must be positive");
        }
        if self.mf_iterations == 0 || !(self.mf_tolerance >= 0.0) || !(0.0..1.0).contains(&self.mf_damping) {
            return bad("mean field needs iterations ≥ 1, tolerance ≥ 0 and damping in [0, 1)");
        }
        self.train_config().validate()
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
            fov_y: self.fov_degrees.to_radians(),
            near_factor: self.near_factor,
            far_factor: self.far_factor,
            silhouette_radius: self.silhouette_radius,
            silhouette_depth_jump: self.silhouette_depth_jump,
            upright_height: self.upright_height,
            input_noise: self.input_noise,
            noise_seed: self.seed,
            phong: Phong {
                ambient: self.phong_ambient,
                diffuse: self.phong_diffuse,
                specular: self.phong_specular,
                shininess: self.phong_shininess,
            },
        }
    }

    pub fn select_config(&self) -> SelectConfig {
        SelectConfig {
            coverage_target: self.coverage_target,
            max_per_scale: self.max_views_per_scale,
        }
    }

    pub fn mean_field_config(&self) -> MeanFieldConfig {
        MeanFieldConfig {
            max_iterations: self.mf_iterations,
            tolerance: self.mf_tolerance,
            damping: self.mf_damping,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            views_per_step: self.views_per_step,
            clip_norm: self.clip_norm,
            crf_max_weight: self.crf_max_weight,
            epochs: self.epochs,
            crf_epochs: self.crf_epochs,
            seed: self.seed,
            mode: self.mode,
            mean_field: self.mean_field_config(),
        }
    }

    /// Input channels of the rendered views under this configuration.
    pub fn input_channels(&self) -> usize {
        if self.upright_height {
            3
        } else {
            2
        }
    }
}
