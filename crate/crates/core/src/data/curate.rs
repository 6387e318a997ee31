//! Scene-cut detection, length filtering and training-window enumeration.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{Float, Tensor};

pub const HISTOGRAM_BINS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HistogramMode {
    /// Bin masses sum to 1.
    #[default]
    Normalized,
    /// Raw pixel counts.
    RawCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClipFilterConfig {
    pub bins: usize,
    /// Cut when the bin-wise RMSE between consecutive histograms exceeds this.
    pub threshold: f64,
    pub min_len: usize,
    pub max_len: usize,
    pub mode: HistogramMode,
}

impl Default for ClipFilterConfig {
    fn default() -> Self {
        Self {
            bins: HISTOGRAM_BINS,
            threshold: 0.02,
            min_len: 15,
            max_len: 200,
            mode: HistogramMode::Normalized,
        }
    }
}

impl ClipFilterConfig {
    /// Raw-count histograms with a threshold of 30.
    pub fn raw_count() -> Self {
        Self {
            threshold: 30.0,
            mode: HistogramMode::RawCount,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins != HISTOGRAM_BINS {
            return Err(invalid!("histograms have {HISTOGRAM_BINS} bins, got {}", self.bins));
        }
        if !(self.threshold >= 0.0) {
            return Err(invalid!("scene-cut threshold must be non-negative"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(invalid!("clip length bounds {}..={} are empty", self.min_len, self.max_len));
        }
        Ok(())
    }
}

/// 10 levels per channel (`min(floor(10 v), 9)`), bin `100 r + 10 g + b`.
pub fn histogram_1000<T: Float>(frame: &Tensor<T>, mode: HistogramMode) -> Vec<f64> {
    let hw = frame.numel() / 3;
    let d = frame.data();
    let level = |v: T| ((v.as_f64() * 10.0).floor().clamp(0.0, 9.0)) as usize;
    let mut hist = vec![0.0; HISTOGRAM_BINS];
    for p in 0..hw {
        hist[100 * level(d[p]) + 10 * level(d[hw + p]) + level(d[2 * hw + p])] += 1.0;
    }
    if mode == HistogramMode::Normalized {
        for v in &mut hist {
            *v /= hw as f64;
        }
    }
    hist
}

pub fn histogram_rmse(a: &[f64], b: &[f64]) -> f64 {
    let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    (sq / a.len() as f64).sqrt()
}

/// Frame ranges of the detected scenes that pass the length filter.
pub fn split_scenes<T: Float>(frames: &[Tensor<T>], config: &ClipFilterConfig) -> Result<Vec<Range<usize>>> {
    config.validate()?;
    if frames.len() < 2 {
        return Err(invalid!("scene splitting needs at least 2 frames"));
    }
    let hists: Vec<Vec<f64>> = frames.iter().map(|f| histogram_1000(f, config.mode)).collect();
    let mut scenes = Vec::new();
    let mut start = 0;
    for t in 0..frames.len() - 1 {
        if histogram_rmse(&hists[t], &hists[t + 1]) > config.threshold {
            scenes.push(start..t + 1);
            start = t + 1;
        }
    }
    scenes.push(start..frames.len());
    Ok(scenes
        .into_iter()
        .filter(|r| r.len() >= config.min_len && r.len() <= config.max_len)
        .collect())
}

/// One training sample: any frame in `candidates` can serve as the reference
/// for the `targets` window. Indices are 0-based.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainingSet {
    pub candidates: Range<usize>,
    pub targets: Range<usize>,
}

/// For `k = 1..=L-N`: targets are frames `k..k+N`, candidates `0..k`.
pub fn build_training_sets(clip_len: usize, frames: usize) -> Vec<TrainingSet> {
    if frames == 0 || clip_len <= frames {
        return Vec::new();
    }
    (1..=clip_len - frames)
        .map(|k| TrainingSet {
            candidates: 0..k,
            targets: k..k + frames,
        })
        .collect()
}
