//! Model and run configuration.
//!
//! A run is described by one TOML document whose tables mirror
//! [`RunConfig`]. Command-line flags override file values, and file values
//! override the defaults below.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::loss::LossKind;

/// Network extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HyperParams {
    /// T: segments per video at granularity 1.
    pub segments: usize,
    /// n: feature channels of the scene and tracklet maps.
    pub channels: usize,
    /// n_c: filters of every downscaler and bottleneck convolution.
    pub conv_channels: usize,
    /// n_h: LSTM hidden units (scene and relation LSTMs).
    pub hidden: usize,
    /// k^s: tracklets kept by the selection step.
    pub selected: usize,
    /// m: ranker and coupler latent width.
    pub ranker_width: usize,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            segments: 32,
            channels: 1024,
            conv_channels: 512,
            hidden: 512,
            selected: 3,
            ranker_width: 64,
            seed: 0,
        }
    }
}

impl HyperParams {
    /// Small extents used by the tests and synthetic experiments.
    pub fn desk(segments: usize, channels: usize) -> Self {
        HyperParams {
            segments,
            channels,
            conv_channels: 16,
            hidden: 16,
            selected: 2,
            ranker_width: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.segments >= 1
                && self.channels >= 1
                && self.conv_channels >= 1
                && self.hidden >= 1
                && self.ranker_width >= 1,
            "all network extents must be positive: {self:?}"
        );
        ensure!(self.selected >= 1, "selected tracklet count must be at least 1");
        Ok(())
    }
}

/// Which score the model is trained and evaluated on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Both branches coupled by the soft selection.
    #[default]
    Full,
    /// Scene branch score alone.
    SceneOnly,
    /// Human branch score alone.
    HumanOnly,
}

/// Architecture switches that change the computation, not the extents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub variant: Variant,
    /// When false, the video-level attention is fixed at 1 and the selection
    /// factors equal the segment-level attentions.
    pub video_level_selection: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            variant: Variant::Full,
            video_level_selection: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    /// Scene branch, then human branch, then coupler with both frozen.
    #[default]
    Staged,
    /// Everything at once against the coupled score.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub learning_rate: f64,
    /// Adam (β1, β2).
    pub betas: (f64, f64),
    /// Total pair-steps; the staged schedule splits them across phases.
    pub steps: usize,
    /// (anomaly, normal) pairs averaged per step.
    pub batch: usize,
    pub seed: u64,
    pub schedule: Schedule,
    pub loss: LossKind,
    /// Divide the context sums by T.
    pub normalize_context: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            learning_rate: 1e-3,
            betas: (0.9, 0.999),
            steps: 2000,
            batch: 1,
            seed: 0,
            schedule: Schedule::Staged,
            loss: LossKind::SelfRectifying,
            normalize_context: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.learning_rate >= 0.0, "learning rate must be non-negative");
        ensure!(self.steps >= 1, "step count must be positive");
        ensure!(self.batch >= 1, "batch must be positive");
        ensure!(
            self.lambda1 >= 0.0 && self.lambda2 >= 0.0,
            "loss weights must be non-negative"
        );
        let (b1, b2) = self.betas;
        ensure!(
            (0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2),
            "decay rates must lie in [0, 1)"
        );
        Ok(())
    }
}

/// Everything a command needs. Missing `segments`/`channels` in
/// `[model]` are inferred from the dataset.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub arch: ArchConfig,
    pub train: TrainConfig,
}

/// `[model]` table: like [`HyperParams`] but with data-derived extents
/// optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub segments: Option<usize>,
    pub channels: Option<usize>,
    pub conv_channels: usize,
    pub hidden: usize,
    pub selected: usize,
    pub ranker_width: usize,
    pub seed: u64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let hp = HyperParams::default();
        ModelSection {
            segments: None,
            channels: None,
            conv_channels: hp.conv_channels,
            hidden: hp.hidden,
            selected: hp.selected,
            ranker_width: hp.ranker_width,
            seed: hp.seed,
        }
    }
}

impl RunConfig {
    pub fn parse_toml(text: &str) -> std::result::Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Resolves the network extents, filling T and n from the data.
    pub fn hyper(&self, data_segments: usize, data_channels: Option<usize>) -> Result<HyperParams> {
        let m = &self.model;
        let segments = m.segments.unwrap_or(data_segments);
        ensure!(
            segments == data_segments,
            "config asks for {segments} segments but the dataset has {data_segments}"
        );
        let channels = match (m.channels, data_channels) {
            (Some(c), Some(d)) => {
                ensure!(c == d, "config asks for {c} channels but the dataset has {d}");
                c
            }
            (Some(c), None) | (None, Some(c)) => c,
            (None, None) => HyperParams::default().channels,
        };
        let hp = HyperParams {
            segments,
            channels,
            conv_channels: m.conv_channels,
            hidden: m.hidden,
            selected: m.selected,
            ranker_width: m.ranker_width,
            seed: m.seed,
        };
        hp.validate()?;
        Ok(hp)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let c = RunConfig::parse_toml("").unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.train.learning_rate, 1e-3);
        assert_eq!(c.train.betas, (0.9, 0.999));
        assert_eq!(c.train.lambda1, 1.0);
    }

    #[test]
    fn round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.model.segments = Some(8);
        c.arch.variant = Variant::HumanOnly;
        c.train.loss = LossKind::ClassicalRanking;
        c.train.schedule = Schedule::Joint;
        let back = RunConfig::parse_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse_toml("[train]\nlr = 3").is_err());
    }

    #[test]
    fn hyper_infers_and_checks_data_extents() {
        let c = RunConfig::default();
        let hp = c.hyper(8, Some(16)).unwrap();
        assert_eq!((hp.segments, hp.channels), (8, 16));
        let mut c = RunConfig::default();
        c.model.channels = Some(4);
        assert!(c.hyper(8, Some(16)).is_err());
    }
}
