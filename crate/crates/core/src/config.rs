//! Run configuration: one JSON object, every key optional, unknown keys
//! rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::denoiser::train::TrainConfig;
use crate::diffusion::{LossWeights, SamplerMode, VarianceSchedule};
use crate::error::{Error, Result};
use crate::grid::GridSpec;
use crate::metrics::{DEFAULT_EMD_POINTS, DEFAULT_TAU};
use crate::render::RenderSettings;
use crate::synth::dataset::DataConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricSettings {
    pub tau: f64,
    /// Points sampled from each extracted surface.
    pub surface_points: usize,
    /// EMD subsample size.
    pub emd_points: usize,
    /// Completions per input for TMD, UHD and MMD.
    pub completions: usize,
    pub iso: f64,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self { tau: DEFAULT_TAU, surface_points: 16384, emd_points: DEFAULT_EMD_POINTS, completions: 10, iso: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset directory used by `train`, `render-views` and `eval`.
    pub dataset: Option<PathBuf>,
    pub grid: GridSpec,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta0: f64,
    #[serde(rename = "betaT")]
    pub beta_t: f64,
    pub sampler_mode: SamplerMode,
    pub lambda: [f64; 3],
    pub phase1_epochs: usize,
    pub phase2_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub voxel_threshold: usize,
    pub second_view_ratio: f64,
    pub render: RenderSettings,
    pub data: DataConfig,
    pub metrics: MetricSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        Self {
            seed: 0,
            dataset: None,
            grid: GridSpec::desk(),
            steps: 50,
            beta0: 2e-3,
            beta_t: 0.4,
            sampler_mode: SamplerMode::default(),
            lambda: [1.0, 0.5, 0.5],
            phase1_epochs: train.phase1_epochs,
            phase2_epochs: train.phase2_epochs,
            batch_size: train.batch_size,
            lr: train.lr,
            hidden: train.hidden,
            embed_dim: train.embed_dim,
            voxel_threshold: train.voxel_threshold,
            second_view_ratio: train.second_view_ratio,
            render: RenderSettings::default(),
            data: DataConfig::default(),
            metrics: MetricSettings::default(),
        }
    }
}

fn key_err(key: &str, e: impl std::fmt::Display) -> Error {
    Error::Config { key: key.to_string(), reason: e.to_string() }
}

impl RunConfig {
    /// Settings of the full-scale run: T = 1000 with beta from 1e-4
    /// to 2e-2, 64^3 grids of 2.5 cm, K = 10, batch 16, lr 1e-4, 8192 points
    /// per view.
    pub fn full_scale_preset() -> Self {
        let mut c = Self {
            grid: GridSpec::full_scale(),
            steps: 1000,
            beta0: 1e-4,
            beta_t: 2e-2,
            phase1_epochs: 250,
            batch_size: 16,
            lr: 1e-4,
            voxel_threshold: 10,
            ..Self::default()
        };
        c.data.points_per_view = 8192;
        c
    }

    pub fn schedule(&self) -> Result<VarianceSchedule> {
        VarianceSchedule::linear(self.steps, self.beta0, self.beta_t).map_err(|e| key_err("T/beta0/betaT", e))
    }

    pub fn weights(&self) -> Result<LossWeights> {
        let [a, b, c] = self.lambda;
        LossWeights::new(a, b, c).map_err(|e| key_err("lambda", e))
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            phase1_epochs: self.phase1_epochs,
            phase2_epochs: self.phase2_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            hidden: self.hidden.clone(),
            embed_dim: self.embed_dim,
            second_view_ratio: self.second_view_ratio,
            voxel_threshold: self.voxel_threshold,
        }
    }

    /// Checks every invariant; the error names the offending key.
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(key_err("T", "must be >= 1"));
        }
        self.schedule()?;
        self.weights()?;
        GridSpec::new(self.grid.dims, self.grid.voxel_size, self.grid.origin).map_err(|e| key_err("grid", e))?;
        if self.embed_dim % 2 == 1 || self.embed_dim == 0 {
            return Err(key_err("embed_dim", "must be even and positive"));
        }
        if self.hidden.contains(&0) {
            return Err(key_err("hidden", "layer widths must be positive"));
        }
        let t = self.train();
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(key_err("lr", "must be > 0"));
        }
        if t.batch_size == 0 {
            return Err(key_err("batch_size", "must be >= 1"));
        }
        if t.voxel_threshold == 0 {
            return Err(key_err("voxel_threshold", "must be >= 1"));
        }
        if !(t.second_view_ratio >= 0.0 && t.second_view_ratio.is_finite()) {
            return Err(key_err("second_view_ratio", "must be a finite fraction >= 0"));
        }
        if self.render.samples < 2 {
            return Err(key_err("render.samples", "must be >= 2"));
        }
        if !(self.render.depth_min_weight >= 0.0) {
            return Err(key_err("render.depth_min_weight", "must be >= 0"));
        }
        self.data.validate().map_err(|e| key_err("data", e))?;
        let m = &self.metrics;
        if !(m.tau > 0.0) {
            return Err(key_err("metrics.tau", "must be > 0"));
        }
        if m.surface_points == 0 || m.emd_points == 0 {
            return Err(key_err("metrics", "point counts must be >= 1"));
        }
        if m.completions < 2 {
            return Err(key_err("metrics.completions", "TMD needs at least 2 completions"));
        }
        if !(m.iso > 0.0 && m.iso < 1.0) {
            return Err(key_err("metrics.iso", "must be in (0, 1)"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<document>".to_string());
            Error::Config { key, reason: msg }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_is_the_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn zero_steps_rejected_by_key() {
        match RunConfig::from_json(r#"{"T": 0}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "T"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_named() {
        match RunConfig::from_json(r#"{"seed": 1, "learning_rate": 0.1}"#) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "learning_rate"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::from_json(r#"{"render": {"samples": 8, "bogus": 1}}"#).is_err());
    }

    #[test]
    fn dump_and_reload_round_trips() {
        for cfg in [RunConfig::default(), RunConfig::full_scale_preset()] {
            let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }
}
