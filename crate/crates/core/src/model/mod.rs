//! Toy video denoiser: a small U-Net with temporal layers, a sketch-guided
//! ControlNet branch, a reference path and per-frame attention modes.
//!
//! Every forward call takes `E = R + N` entries. The first `R` form the
//! reference bundle (entry 0 is the global reference, entries `1..R` are
//! previously generated overlap frames); the remaining `N` are video frames.

mod build;
pub mod checkpoint;
mod forward;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use build::{build, param_layout, ParamInit, ParamSpec};
pub use forward::{forward, Denoiser, ForwardInput};

/// How the amplified overlap keys are emphasized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AmplifyMode {
    /// Additive logit bias `ln α`: unnormalized weights grow by exactly `α`.
    #[default]
    LogitBias,
    /// Multiplies the previous-result keys by `ln α`.
    KeyScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub base_channels: usize,
    pub channel_mults: Vec<usize>,
    pub frames: usize,
    pub head_dim: usize,
    pub latent_channels: usize,
    pub sketch_channels: usize,
    pub norm_groups: usize,
    pub embed_dim: usize,
    pub sketch_features: usize,
    pub temporal_kernel: usize,
    /// When false, spatial attention never looks outside the query's own
    /// entry (the model-level ablation).
    pub reference_attention: bool,
    pub amplify: AmplifyMode,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            base_channels: 32,
            channel_mults: vec![1, 2],
            frames: 14,
            head_dim: 32,
            latent_channels: crate::vae::LATENT_CHANNELS,
            sketch_channels: 1,
            norm_groups: 8,
            embed_dim: 64,
            sketch_features: 16,
            temporal_kernel: 3,
            reference_attention: true,
            amplify: AmplifyMode::LogitBias,
        }
    }
}

impl DenoiserConfig {
    pub fn channels(&self) -> Vec<usize> {
        self.channel_mults
            .iter()
            .map(|m| m * self.base_channels)
            .collect()
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn heads(&self, channels: usize) -> usize {
        (channels / self.head_dim.max(1)).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("head_dim", self.head_dim),
            ("latent_channels", self.latent_channels),
            ("sketch_channels", self.sketch_channels),
            ("norm_groups", self.norm_groups),
            ("embed_dim", self.embed_dim),
            ("sketch_features", self.sketch_features),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(invalid!("model.{name} must be positive"));
            }
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return Err(invalid!("model.channel_mults must be non-empty and positive"));
        }
        if self.frames < 2 {
            return Err(invalid!("model.frames must be at least 2, got {}", self.frames));
        }
        if self.temporal_kernel % 2 == 0 {
            return Err(invalid!("model.temporal_kernel must be odd"));
        }
        if self.base_channels % 2 != 0 {
            return Err(invalid!("model.base_channels must be even (noise embedding width)"));
        }
        for c in build::norm_channel_counts(self) {
            if c % self.norm_groups != 0 {
                return Err(invalid!(
                    "model.norm_groups = {} does not divide a {c}-channel feature map",
                    self.norm_groups
                ));
            }
        }
        for c in self.channels() {
            if c % self.heads(c) != 0 {
                return Err(invalid!("{c} channels cannot be split into {} heads", self.heads(c)));
            }
        }
        Ok(())
    }

    /// Latent spatial sizes must survive `levels - 1` halvings.
    pub fn check_latent_size(&self, h: usize, w: usize) -> Result<()> {
        let f = 1 << (self.levels() - 1);
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(invalid!(
                "latent size {h}x{w} must be divisible by {f} for {} levels",
                self.levels()
            ));
        }
        Ok(())
    }
}

/// Spatial-attention directive for one video frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum AttentionMode {
    /// Keys: own tokens plus the global reference.
    Standard,
    /// Keys: own tokens plus bundle element `i`, emphasized by `alpha`.
    OverlapAmplified { alpha: f64 },
    /// Keys: frame `i - shift` plus the global reference.
    PrevReference { shift: usize },
}

pub const DEFAULT_ALPHA: f64 = 10.0;
pub const DEFAULT_SHIFT: usize = 3;

/// Additive logit bias on the amplified keys of `mode`: `ln α`, so each
/// amplified key's unnormalized weight is multiplied by `α`. Zero for the
/// other modes.
pub fn amplify_bias(mode: &AttentionMode) -> f64 {
    match mode {
        AttentionMode::OverlapAmplified { alpha } => alpha.ln(),
        _ => 0.0,
    }
}

/// Directive for frame `i` (1-based) of segment `n` (1-based) with overlap `o`.
pub fn attention_mode_for(i: usize, n: usize, o: usize, alpha: f64, shift: usize) -> AttentionMode {
    if n <= 1 {
        AttentionMode::Standard
    } else if i <= o {
        AttentionMode::OverlapAmplified { alpha }
    } else {
        AttentionMode::PrevReference { shift }
    }
}

/// Modes for all `frames` of segment `n`.
pub fn segment_modes(frames: usize, n: usize, o: usize, alpha: f64, shift: usize) -> Vec<AttentionMode> {
    (1..=frames)
        .map(|i| attention_mode_for(i, n, o, alpha, shift))
        .collect()
}

/// Checks a schedule against a bundle of `refs` entries (overlap `refs - 1`).
pub fn validate_modes(modes: &[AttentionMode], refs: usize) -> Result<()> {
    if refs == 0 {
        return Err(invalid!("the reference bundle needs at least the global reference"));
    }
    let o = refs - 1;
    for (idx, mode) in modes.iter().enumerate() {
        let i = idx + 1;
        match *mode {
            AttentionMode::Standard => {
                if i <= o {
                    return Err(invalid!(
                        "frame {i} is Standard but bundle element {i} (a previous result) is present"
                    ));
                }
            }
            AttentionMode::OverlapAmplified { alpha } => {
                if i > o {
                    return Err(invalid!("frame {i} is amplified but the overlap is only {o}"));
                }
                if !(alpha > 1.0) || !alpha.is_finite() {
                    return Err(invalid!("amplification must be finite and > 1, got {alpha}"));
                }
            }
            AttentionMode::PrevReference { shift } => {
                if i <= o {
                    return Err(invalid!("frame {i} uses prev-reference inside the overlap {o}"));
                }
                if shift == 0 || shift >= i {
                    return Err(invalid!("frame {i} cannot reference frame {i} - {shift}"));
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_segment_is_standard() {
        for i in 1..=14 {
            assert_eq!(attention_mode_for(i, 1, 4, 10.0, 3), AttentionMode::Standard);
        }
    }

    #[test]
    fn later_segments_split_at_overlap() {
        assert_eq!(
            attention_mode_for(3, 2, 4, 10.0, 3),
            AttentionMode::OverlapAmplified { alpha: 10.0 }
        );
        assert_eq!(attention_mode_for(5, 2, 4, 10.0, 3), AttentionMode::PrevReference { shift: 3 });
        assert!(validate_modes(&segment_modes(14, 2, 4, 10.0, 3), 5).is_ok());
        assert!(validate_modes(&segment_modes(14, 1, 4, 10.0, 3), 1).is_ok());
    }

    #[test]
    fn inconsistent_schedules_are_rejected() {
        // amplified frames without previous results
        assert!(validate_modes(&segment_modes(6, 2, 4, 10.0, 3), 1).is_err());
        // previous results but Standard frames
        assert!(validate_modes(&segment_modes(6, 1, 4, 10.0, 3), 5).is_err());
        // shift reaching before the segment
        assert!(validate_modes(&segment_modes(6, 2, 2, 10.0, 3), 3).is_err());
        assert!(validate_modes(&[], 0).is_err());
    }

    #[test]
    fn default_config_is_valid() {
        DenoiserConfig::default().validate().unwrap();
        let bad = DenoiserConfig {
            norm_groups: 5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
