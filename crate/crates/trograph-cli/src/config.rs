//! Run configuration: one JSON file covering the schedule, graph sizes,
//! model dimensions, guidance, and training hyperparameters. Every field
//! has a default, so an absent config file means "all defaults" and
//! `init-config` can emit the complete schema for editing.

use serde::{Deserialize, Serialize};
use std::path::Path;
use trograph::denoiser::{ModelConfig, TrainConfig};
use trograph::diffusion::{
    linear_schedule, DiffusionSchedule, DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, DEFAULT_DDIM_STEPS,
    DEFAULT_LAMBDA, DEFAULT_STEP_COUNT,
};
use trograph::{Error, Result};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_count: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ddim_steps: usize,
    pub lambda: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            t_count: DEFAULT_STEP_COUNT,
            beta_min: DEFAULT_BETA_MIN,
            beta_max: DEFAULT_BETA_MAX,
            ddim_steps: DEFAULT_DDIM_STEPS,
            lambda: DEFAULT_LAMBDA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Object patch count P.
    pub patch_count: usize,
    /// Padded link-slot count.
    pub l_pad: usize,
    /// Seed for the object patch features (basis points and projection).
    pub feature_seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig { patch_count: 25, l_pad: 25, feature_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Token width of the denoiser.
    pub d: usize,
    /// Denoising layer count.
    pub layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { d: 64, layers: 6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GuidanceConfig {
    /// Peak steering strength `g_s`.
    pub strength_max: f64,
    /// Conditioning depth for closed-loop and guided runs, as a fraction
    /// of the schedule length; snapped to the nearest DDIM grid step.
    pub t_star_fraction: f64,
    /// Whether conditioned runs also gradient-steer toward the guidance
    /// target (renoising alone when false).
    pub steer: bool,
    /// Neighbourhood size for contact regions built from a cloud point.
    pub contact_neighbours: usize,
    /// Heat falloff width (meters) for contact regions built from a cloud
    /// point.
    pub contact_heat_sigma: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            strength_max: 0.2,
            t_star_fraction: 0.15,
            steer: true,
            contact_neighbours: 16,
            contact_heat_sigma: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub graph: GraphConfig,
    pub model: ModelSection,
    pub guidance: GuidanceConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 0,
            schedule: ScheduleConfig::default(),
            graph: GraphConfig::default(),
            model: ModelSection::default(),
            guidance: GuidanceConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let config: RunConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Structure(format!(
                "config schema version {} is not {CONFIG_SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        // Schedule and model parameters are validated by their builders;
        // cross-field checks live here.
        self.schedule_for()?;
        self.model_config()?.validate()?;
        self.train.validate()?;
        if self.graph.patch_count == 0 || self.graph.l_pad == 0 {
            return Err(Error::invalid("graph patch_count and l_pad must be positive"));
        }
        if !(0.0..=1.0).contains(&self.guidance.t_star_fraction) {
            return Err(Error::invalid(format!(
                "guidance t_star_fraction must lie in [0, 1], got {}",
                self.guidance.t_star_fraction
            )));
        }
        if !self.guidance.strength_max.is_finite() || self.guidance.strength_max < 0.0 {
            return Err(Error::invalid(format!(
                "guidance strength_max must be finite and non-negative, got {}",
                self.guidance.strength_max
            )));
        }
        if self.guidance.contact_neighbours == 0 {
            return Err(Error::invalid("guidance contact_neighbours must be positive"));
        }
        if !(self.guidance.contact_heat_sigma > 0.0)
            || !self.guidance.contact_heat_sigma.is_finite()
        {
            return Err(Error::invalid(format!(
                "guidance contact_heat_sigma must be positive, got {}",
                self.guidance.contact_heat_sigma
            )));
        }
        Ok(())
    }

    /// The diffusion schedule this config describes.
    pub fn schedule_for(&self) -> Result<DiffusionSchedule> {
        linear_schedule(self.schedule.t_count, self.schedule.beta_min, self.schedule.beta_max)?
            .with_ddim_steps(self.schedule.ddim_steps)?
            .with_lambda(self.schedule.lambda)
    }

    /// The denoiser shape this config describes.
    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            d: self.model.d,
            layers: self.model.layers,
            l_pad: self.graph.l_pad,
            p: self.graph.patch_count,
            t_max: self.schedule.t_count,
        })
    }

    /// Default conditioning depth: the DDIM grid step nearest
    /// `t_star_fraction` of the schedule length.
    pub fn default_t_star(&self, schedule: &DiffusionSchedule) -> usize {
        let raw = (self.guidance.t_star_fraction * self.schedule.t_count as f64).round() as usize;
        schedule.nearest_grid_step(raw.max(1))
    }
}
