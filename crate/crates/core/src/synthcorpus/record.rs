use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use crate::codecs::{HEAD_LATENT_DIM, HEAD_POSE_DIM, MEL_BINS, PARTICIPANT_FEATURE_DIM, TOKEN_DIM};
use crate::error::{Error, Result};

/// Link from a participant smile to the actor's expected smile.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReactionLink {
    pub participant_frame: u32,
    pub actor_frame: u32,
}

/// Ground truth known by construction.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotations {
    /// Lexicon index sounding at every frame.
    pub symbols: Vec<u8>,
    /// `(lexicon index, frames)` of the acoustic timeline.
    pub segments: Vec<(u8, u32)>,
    /// `(lexicon index, frames)` of the timeline the token logits follow.
    pub token_segments: Vec<(u8, u32)>,
    /// Start frames of every non-silent symbol.
    pub onsets: Vec<u32>,
    /// Emphasized onsets: audio attacks, head nods and expression strokes start here.
    pub beat_frames: Vec<u32>,
    /// Frames whose lip gap is below the closure threshold.
    pub closure_frames: Vec<u32>,
    /// Frames where the actor is expected to start smiling.
    pub smile_frames: Vec<u32>,
    pub reactions: Vec<ReactionLink>,
}

/// One sequence. Only tokens are mandatory; the other streams are present
/// in generated corpora and in inference outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub tokens: Tensor,
    pub mel: Option<Tensor>,
    pub face: Option<Tensor>,
    pub head_pose: Option<Tensor>,
    pub head_latent: Option<Tensor>,
    pub participant_features: Option<Tensor>,
    pub participant_tokens: Option<Tensor>,
    pub annotations: Option<Annotations>,
}

impl CorpusRecord {
    pub fn tokens_only(tokens: Tensor) -> Self {
        Self {
            tokens,
            mel: None,
            face: None,
            head_pose: None,
            head_latent: None,
            participant_features: None,
            participant_tokens: None,
            annotations: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.tokens.rows()
    }

    pub fn has_participant(&self) -> bool {
        self.participant_features.is_some() && self.participant_tokens.is_some()
    }

    /// Stream lengths and widths agree; annotations fit inside the record.
    pub fn validate(&self, face_dim: usize) -> Result<()> {
        let n = self.frames();
        let streams = [
            ("tokens", Some(&self.tokens), TOKEN_DIM),
            ("mel", self.mel.as_ref(), MEL_BINS),
            ("face", self.face.as_ref(), face_dim),
            ("head pose", self.head_pose.as_ref(), HEAD_POSE_DIM),
            ("head latent", self.head_latent.as_ref(), HEAD_LATENT_DIM),
            ("participant features", self.participant_features.as_ref(), PARTICIPANT_FEATURE_DIM),
            ("participant tokens", self.participant_tokens.as_ref(), TOKEN_DIM),
        ];
        for (name, t, width) in streams {
            let Some(t) = t else { continue };
            if t.rank() != 2 || t.rows() != n || t.last_dim() != width {
                return Err(Error::CorruptRecord(format!(
                    "{name} has shape {:?}, expected [{n}, {width}]",
                    t.shape()
                )));
            }
        }
        if let Some(a) = &self.annotations {
            if !a.symbols.is_empty() && a.symbols.len() != n {
                return Err(Error::CorruptRecord(format!("{} symbol labels for {n} frames", a.symbols.len())));
            }
            for (what, segs) in [("segments", &a.segments), ("token segments", &a.token_segments)] {
                let total: u64 = segs.iter().map(|s| s.1 as u64).sum();
                if !segs.is_empty() && total != n as u64 {
                    return Err(Error::CorruptRecord(format!("{what} cover {total} of {n} frames")));
                }
            }
            let frames = a.onsets.iter().chain(&a.beat_frames).chain(&a.closure_frames);
            if frames.copied().any(|f| f as usize >= n) {
                return Err(Error::CorruptRecord("annotation frame outside the record".into()));
            }
        }
        Ok(())
    }
}
