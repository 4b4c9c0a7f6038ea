use std::path::{Path, PathBuf};

use ndgrad::AdamW;
use serde::{Deserialize, Serialize};

use crate::avdit::{DitConfig, Guidance, Variant};
use crate::codecs::HeadVaeConfig;
use crate::error::{Error, Result};
use crate::flowmatch::FlowConfig;
use crate::metrics::MetricsConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm clip; zero disables clipping.
    pub clip_norm: f64,
    /// Linear warmup steps at the start of training.
    pub warmup: usize,
    /// Final learning rate as a fraction of `lr`, reached by cosine decay at the last step.
    /// One keeps the rate constant.
    pub final_lr_fraction: f32,
}

impl Default for OptimConfig {
    /// Desk-scale learning rate; the moment and epsilon settings are the full-size ones.
    fn default() -> Self {
        Self {
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
            clip_norm: 1.0,
            warmup: 20,
            final_lr_fraction: 0.05,
        }
    }
}

impl OptimConfig {
    /// Learning rate for 1-based `step` of a `total`-step run.
    pub fn lr_at(&self, step: usize, total: usize) -> f32 {
        if step <= self.warmup {
            return self.lr * step as f32 / (self.warmup + 1) as f32;
        }
        let span = total.saturating_sub(self.warmup).max(1) as f32;
        let progress = ((step - self.warmup) as f32 / span).min(1.0);
        let cos = 0.5 * (1.0 + (std::f32::consts::PI * progress).cos());
        self.lr * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }

    pub fn adamw(&self) -> AdamW {
        self.adamw_at(self.lr)
    }

    pub fn adamw_at(&self, lr: f32) -> AdamW {
        AdamW {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Held-out records to sample and score; zero means all held-out records.
    pub records: usize,
    /// Shuffled-audio pairings per sequence for the beat-align baseline.
    pub shuffles: usize,
    /// Frames of slack when matching smile events.
    pub smile_slack: usize,
    /// Required margin of the fused model over separate stacks on both beat-align scores.
    pub bc_margin: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            records: 0,
            shuffles: 20,
            smile_slack: 5,
            bc_margin: 0.0,
        }
    }
}

/// Everything that determines a training run. Stored as TOML and echoed into reports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub seed: u64,
    pub variant: Variant,
    pub guidance: Guidance,
    pub max_steps: usize,
    /// Segments per batch.
    pub batch_segments: usize,
    /// Frames per training segment.
    pub segment_frames: usize,
    /// Records at the end of the corpus kept out of training for evaluation.
    pub holdout: usize,
    pub checkpoint_every: usize,
    pub log_every: usize,
    /// Train the fused model with fusion pinned at zero.
    pub zero_fusion: bool,
    /// Fraction of steps the cascaded variant spends on its audio stack.
    pub cascade_split: f32,
    pub model: DitConfig,
    pub flow: FlowConfig,
    pub optimizer: OptimConfig,
    pub head_vae: HeadVaeConfig,
    pub metrics: MetricsConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.avfc"),
            seed: 0,
            variant: Variant::AvFlow,
            guidance: Guidance::None,
            max_steps: 1200,
            batch_segments: 8,
            segment_frames: 128,
            holdout: 20,
            checkpoint_every: 200,
            log_every: 10,
            zero_fusion: false,
            cascade_split: 0.5,
            model: DitConfig::default(),
            flow: FlowConfig::default(),
            optimizer: OptimConfig::default(),
            head_vae: HeadVaeConfig::default(),
            metrics: MetricsConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-size widths, 16 segments of 20 s per batch and the full-size learning rate.
    pub fn with_full_dims(mut self) -> Self {
        self.model = DitConfig::full_dims();
        self.batch_segments = 16;
        self.segment_frames = 1720;
        self.optimizer.lr = 1e-4;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| Error::ConfigInvalid(e.to_string()))?;
        self.flow.validate()?;
        if self.max_steps == 0 || self.batch_segments == 0 || self.segment_frames == 0 {
            return Err(Error::ConfigInvalid("steps, batch and segment length must be positive".into()));
        }
        if self.segment_frames < self.model.window {
            return Err(Error::ConfigInvalid(format!(
                "segments of {} frames are shorter than the attention window {}",
                self.segment_frames, self.model.window
            )));
        }
        if !(self.optimizer.lr > 0.0) || !(0.0..1.0).contains(&self.optimizer.beta1) || !(0.0..1.0).contains(&self.optimizer.beta2) {
            return Err(Error::ConfigInvalid("optimizer settings out of range".into()));
        }
        if !(0.0..=1.0).contains(&self.optimizer.final_lr_fraction) {
            return Err(Error::ConfigInvalid("final learning-rate fraction must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.cascade_split) || self.cascade_split == 0.0 {
            return Err(Error::ConfigInvalid("cascade split must lie in (0, 1)".into()));
        }
        if self.zero_fusion && self.variant != Variant::AvFlow {
            return Err(Error::ConfigInvalid("zero fusion only applies to the fused variant".into()));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 {
            return Err(Error::ConfigInvalid("logging and checkpoint intervals must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::ConfigInvalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::ConfigInvalid(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn echo(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_partial_files() {
        let cfg = RunConfig {
            variant: Variant::Cascaded,
            guidance: Guidance::AudioVisual,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("max_steps = 5\nvariant = \"shared\"\n[optimizer]\nlr = 0.01\n").unwrap();
        assert_eq!(partial.max_steps, 5);
        assert_eq!(partial.variant, Variant::Shared);
        assert_eq!(partial.optimizer.lr, 0.01);
        assert_eq!(partial.optimizer.beta2, 0.98);
        assert!(RunConfig::from_toml("variant = \"bogus\"").is_err());
    }

    #[test]
    fn schedule_warms_up_then_decays() {
        let o = OptimConfig::default();
        assert!(o.lr_at(1, 1000) < o.lr_at(o.warmup, 1000));
        assert!((o.lr_at(o.warmup + 1, 1000) - o.lr).abs() < 1e-5);
        assert!((o.lr_at(1000, 1000) - o.lr * o.final_lr_fraction).abs() < 1e-7);
        let flat = OptimConfig { warmup: 0, final_lr_fraction: 1.0, ..o };
        assert_eq!(flat.lr_at(7, 10), flat.lr);
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        assert!(RunConfig::default().with_full_dims().validate().is_ok());
        let bad = RunConfig { max_steps: 0, ..RunConfig::default() };
        assert!(matches!(bad.validate(), Err(Error::ConfigInvalid(_))));
        let bad = RunConfig { zero_fusion: true, variant: Variant::Shared, ..RunConfig::default() };
        assert!(bad.validate().is_err());
    }
}
