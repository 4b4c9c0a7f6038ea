//! The dual diffusion transformer: an audio stack and a vision stack of
//! windowed-attention blocks, conditioned in context on token logits (and
//! optionally on a conversation partner), joined after every block by a
//! residual linear fusion.

mod fusion;
mod model;

use std::fmt;
use std::str::FromStr;

use ndgrad::{Band, Tensor};
use serde::{Deserialize, Serialize};

pub use fusion::{fuse, fuse_values, Fusion};
pub use model::{AvDit, ConditionBundle, Stack};

use crate::codecs::{
    TokenSequence, HEAD_LATENT_DIM, MEL_BINS, PARTICIPANT_DIM, PARTICIPANT_FEATURE_DIM, TOKEN_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{Block, Linear, TIME_FEATURES};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DitConfig {
    pub blocks: usize,
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
    pub window: usize,
    pub lookahead: usize,
    pub face_dim: usize,
}

impl Default for DitConfig {
    /// Desk-scale widths.
    fn default() -> Self {
        Self {
            blocks: 2,
            width: 128,
            hidden: 256,
            heads: 4,
            window: 10,
            lookahead: 2,
            face_dim: 16,
        }
    }
}

impl DitConfig {
    /// Full-size hyperparameters: 8 blocks, width 512, hidden 1024, 4 heads, 256-d face codes.
    pub fn full_dims() -> Self {
        Self {
            blocks: 8,
            width: 512,
            hidden: 1024,
            heads: 4,
            window: 10,
            lookahead: 2,
            face_dim: 256,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 || self.width == 0 || self.hidden == 0 {
            return Err(Error::ConfigMismatch("blocks, width and hidden must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::ConfigMismatch(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if (self.width / self.heads) % 2 != 0 {
            return Err(Error::OddHeadDim(self.width / self.heads));
        }
        if self.window == 0 || self.lookahead >= self.window {
            return Err(Error::ConfigMismatch(format!(
                "lookahead {} must be smaller than window {}",
                self.lookahead, self.window
            )));
        }
        Ok(())
    }

    /// Width of the vision stream: head latent followed by face codes.
    pub fn vision_dim(&self) -> usize {
        HEAD_LATENT_DIM + self.face_dim
    }

    /// Attention band of block `index` for sequences of `segment` frames.
    ///
    /// The first block looks `lookahead` frames ahead; later blocks are
    /// strictly causal so the total lookahead of the stack stays bounded.
    pub fn band(&self, index: usize, segment: usize) -> Band {
        if index == 0 {
            Band {
                behind: self.window - 1 - self.lookahead,
                ahead: self.lookahead,
                segment,
            }
        } else {
            Band {
                behind: self.window - 1,
                ahead: 0,
                segment,
            }
        }
    }

    /// Frames of future context any output frame can see.
    pub fn total_lookahead(&self) -> usize {
        self.lookahead
    }

    fn stack_params(&self, input: usize, output: usize) -> usize {
        let d = self.width;
        Linear::num_params(input, d)
            + Linear::num_params(TIME_FEATURES, d)
            + self.blocks * Block::num_params(d, self.hidden)
            + 2 * d
            + Linear::num_params(d, output)
    }

    fn fusion_params(&self) -> usize {
        let d = self.width;
        self.blocks * 2 * (2 * d * d + d)
    }

    /// Number of learnable scalars for a variant, derived from the layer shapes.
    pub fn num_params(&self, variant: Variant) -> usize {
        let cond = TOKEN_DIM + PARTICIPANT_DIM;
        let audio = self.stack_params(MEL_BINS + cond, MEL_BINS);
        let vision = self.stack_params(self.vision_dim() + cond, self.vision_dim());
        match variant {
            Variant::AvFlow => audio + vision + self.fusion_params(),
            Variant::Separate => audio + vision,
            Variant::Shared => {
                let both = MEL_BINS + self.vision_dim();
                self.stack_params(both + cond, both)
            }
            Variant::Cascaded => audio + self.stack_params(self.vision_dim() + cond + MEL_BINS, self.vision_dim()),
        }
    }
}

/// Frame `i` attends to `[i - (window - 1 - lookahead), i + lookahead]`, clamped to `[0, n)`.
/// Ranges are inclusive.
pub fn window_mask(n: usize, window: usize, lookahead: usize) -> Vec<(usize, usize)> {
    let behind = window.saturating_sub(1 + lookahead);
    (0..n)
        .map(|i| (i.saturating_sub(behind), (i + lookahead).min(n.saturating_sub(1))))
        .collect()
}

/// Architecture variants compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Two stacks joined by fusion after every block.
    AvFlow,
    /// Two independent stacks.
    Separate,
    /// One stack producing both streams.
    Shared,
    /// Audio stack first, then a vision stack driven by the generated audio.
    Cascaded,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::AvFlow, Variant::Separate, Variant::Shared, Variant::Cascaded];

    pub fn id(self) -> u8 {
        match self {
            Variant::AvFlow => 0,
            Variant::Separate => 1,
            Variant::Shared => 2,
            Variant::Cascaded => 3,
        }
    }

    pub fn from_id(id: u8) -> Option<Self> {
        Self::ALL.get(id as usize).copied()
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::AvFlow => "avflow",
            Variant::Separate => "separate",
            Variant::Shared => "shared",
            Variant::Cascaded => "cascaded",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avflow" => Ok(Variant::AvFlow),
            "separate" => Ok(Variant::Separate),
            "shared" => Ok(Variant::Shared),
            "cascaded" => Ok(Variant::Cascaded),
            other => Err(Error::ConfigInvalid(format!("unknown variant {other:?}"))),
        }
    }
}

/// Which participant streams reach the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Guidance {
    #[default]
    None,
    /// Participant token logits only.
    Audio,
    /// Participant expression, jaw and rotation only.
    Visual,
    AudioVisual,
}

impl Guidance {
    pub fn uses_features(self) -> bool {
        matches!(self, Guidance::Visual | Guidance::AudioVisual)
    }

    pub fn uses_tokens(self) -> bool {
        matches!(self, Guidance::Audio | Guidance::AudioVisual)
    }

    /// Builds the 85-wide participant input, zeroing the streams this mode leaves out.
    pub fn participant_input(self, features: &ParticipantFeatures, tokens: &TokenSequence) -> Result<Tensor> {
        let n = features.frames();
        if tokens.frames() != n {
            return Err(Error::FrameCountMismatch(format!(
                "participant features {n} frames, participant tokens {}",
                tokens.frames()
            )));
        }
        let mut data = Vec::with_capacity(n * PARTICIPANT_DIM);
        for i in 0..n {
            if self.uses_features() {
                data.extend_from_slice(features.features().row(i));
            } else {
                data.extend(std::iter::repeat_n(0.0, PARTICIPANT_FEATURE_DIM));
            }
            if self.uses_tokens() {
                data.extend_from_slice(tokens.logits().row(i));
            } else {
                data.extend(std::iter::repeat_n(0.0, TOKEN_DIM));
            }
        }
        Ok(Tensor::new(&[n, PARTICIPANT_DIM], data)?)
    }
}

impl fmt::Display for Guidance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Guidance::None => "none",
            Guidance::Audio => "audio",
            Guidance::Visual => "visual",
            Guidance::AudioVisual => "audiovisual",
        })
    }
}

impl FromStr for Guidance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Guidance::None),
            "audio" => Ok(Guidance::Audio),
            "visual" => Ok(Guidance::Visual),
            "audiovisual" => Ok(Guidance::AudioVisual),
            other => Err(Error::ConfigInvalid(format!("unknown guidance {other:?}"))),
        }
    }
}

/// Conversation partner's per-frame expression (50), jaw (3) and head rotation (3).
#[derive(Clone, Debug, PartialEq)]
pub struct ParticipantFeatures(Tensor);

impl ParticipantFeatures {
    pub fn new(features: Tensor) -> Result<Self> {
        if features.rank() != 2 || features.last_dim() != PARTICIPANT_FEATURE_DIM {
            return Err(Error::DimensionMismatch {
                expected: PARTICIPANT_FEATURE_DIM,
                got: features.last_dim(),
            });
        }
        Ok(Self(features))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn features(&self) -> &Tensor {
        &self.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_rule_enumerated() {
        let m = window_mask(40, 10, 2);
        assert_eq!(m[20], (13, 22));
        assert_eq!(m[0], (0, 2));
        assert_eq!(m[39], (32, 39));
    }

    #[test]
    fn zero_lookahead_is_causal() {
        for (i, &(lo, hi)) in window_mask(30, 10, 0).iter().enumerate() {
            assert_eq!(hi, i);
            assert_eq!(lo, i.saturating_sub(9));
        }
    }

    #[test]
    fn short_sequences_clamp() {
        let m = window_mask(4, 10, 2);
        assert_eq!(m, vec![(0, 2), (0, 3), (0, 3), (0, 3)]);
    }

    #[test]
    fn first_block_band_matches_mask() {
        let cfg = DitConfig::default();
        let band = cfg.band(0, 40);
        let mask = window_mask(40, cfg.window, cfg.lookahead);
        for (i, &(lo, hi)) in mask.iter().enumerate() {
            let seen: Vec<usize> = (0..band.width()).filter_map(|j| band.source(i, j)).collect();
            assert_eq!(seen, (lo..=hi).collect::<Vec<_>>());
        }
    }

    #[test]
    fn variant_and_guidance_parse() {
        for v in Variant::ALL {
            assert_eq!(v.to_string().parse::<Variant>().unwrap(), v);
            assert_eq!(Variant::from_id(v.id()), Some(v));
        }
        assert!("fused".parse::<Variant>().is_err());
        assert_eq!("audiovisual".parse::<Guidance>().unwrap(), Guidance::AudioVisual);
    }

    #[test]
    fn config_validation() {
        assert!(DitConfig::default().validate().is_ok());
        assert!(DitConfig::full_dims().validate().is_ok());
        let bad = DitConfig { lookahead: 10, ..DitConfig::default() };
        assert!(bad.validate().is_err());
        let odd = DitConfig { width: 12, heads: 4, ..DitConfig::default() };
        assert!(matches!(odd.validate(), Err(Error::OddHeadDim(3))));
    }

    #[test]
    fn shared_is_smaller_than_avflow() {
        for cfg in [DitConfig::default(), DitConfig::full_dims()] {
            assert!(cfg.num_params(Variant::Shared) < cfg.num_params(Variant::AvFlow));
        }
    }
}
