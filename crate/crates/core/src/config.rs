//! TOML run configuration with `[data]`, `[model]`, `[train]`, `[sample]`
//! and `[eval]` sections. Every field has a default; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{ClipFilterConfig, ClipSpec};
use crate::error::{Error, Result};
use crate::metrics::EvalConfig;
use crate::model::DenoiserConfig;
use crate::sampler::SamplerConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Clip directory written by `datagen`; clips are generated in memory when unset.
    pub dir: Option<PathBuf>,
    pub clips: usize,
    pub seed: u64,
    pub length: usize,
    pub height: usize,
    pub width: usize,
    pub n_shapes: usize,
    pub motion_scale: f64,
    pub scaling: bool,
    pub filter: ClipFilterConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            clips: 500,
            seed: 0,
            length: 16,
            height: 64,
            width: 64,
            n_shapes: 3,
            motion_scale: 3.0,
            scaling: true,
            filter: ClipFilterConfig::default(),
        }
    }
}

impl DataConfig {
    /// Generator settings of clip `index`.
    pub fn clip_spec(&self, index: usize) -> ClipSpec {
        ClipSpec {
            seed: self.seed.wrapping_add(index as u64),
            length: self.length,
            height: self.height,
            width: self.width,
            n_shapes: self.n_shapes,
            motion_scale: self.motion_scale,
            scaling: self.scaling,
        }
    }
}

/// Evaluation metrics plus the held-out test set and the overlap sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSettings {
    /// Square evaluation resolution; 0 keeps the native size.
    pub resolution: usize,
    pub test_clips: usize,
    pub test_length: usize,
    pub test_seed: u64,
    /// Per-clip motion scale is spread evenly over this range (pixels/frame).
    pub test_motion: (f64, f64),
    /// Clips above this mean motion (pixels) enter the colour comparison.
    pub motion_threshold: f64,
    /// Fraction of clips on which each ordering must hold.
    pub min_fraction: f64,
    /// Overlaps timed by `ablate --overlap`.
    pub sweep_overlaps: Vec<usize>,
    /// Video length and segment length of the overlap sweep.
    pub sweep_length: usize,
    pub sweep_frames: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            resolution: 256,
            test_clips: 50,
            test_length: 18,
            test_seed: 1_000_000,
            test_motion: (2.0, 8.0),
            motion_threshold: 5.0,
            min_fraction: 0.6,
            sweep_overlaps: vec![2, 4, 6, 8, 10],
            sweep_length: 50,
            sweep_frames: 14,
        }
    }
}

impl EvalSettings {
    pub fn metrics(&self) -> EvalConfig {
        EvalConfig {
            resolution: self.resolution,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub sample: SamplerConfig,
    pub eval: EvalSettings,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.data.clip_spec(0).validate().map_err(cfg)?;
        self.data.filter.validate().map_err(cfg)?;
        self.sample.schedule.validate().map_err(cfg)?;
        if self.sample.overlap >= self.model.frames {
            return Err(Error::Config(format!(
                "sample.overlap {} must be below model.frames {}",
                self.sample.overlap, self.model.frames
            )));
        }
        if !(self.sample.alpha > 1.0) {
            return Err(Error::Config("sample.alpha must exceed 1".into()));
        }
        let (lo, hi) = self.eval.test_motion;
        if !(lo >= 0.0 && hi >= lo) {
            return Err(Error::Config("eval.test_motion must be an ordered non-negative range".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.min_fraction) {
            return Err(Error::Config("eval.min_fraction must lie in [0, 1]".into()));
        }
        if self.eval.test_length < self.model.frames {
            return Err(Error::Config(format!(
                "eval.test_length {} is shorter than one {}-frame segment",
                self.eval.test_length, self.model.frames
            )));
        }
        if self.eval.sweep_overlaps.iter().any(|&o| o >= self.eval.sweep_frames) {
            return Err(Error::Config("eval.sweep_overlaps must be below eval.sweep_frames".into()));
        }
        if self.eval.sweep_length < self.eval.sweep_frames {
            return Err(Error::Config("eval.sweep_length is shorter than one sweep segment".into()));
        }
        Ok(())
    }
}
