//! Representation layer: per-frame token logits, facial codes, head pose in
//! quaternion form, the temporal head-pose VAE, and the toy lip decoder used
//! by the lip-sync metric.

mod head_vae;
mod lipdec;
mod quat;
mod streams;

pub use head_vae::{kl_divergence, HeadVae, HeadVaeConfig, HeadVaeReport};
pub use lipdec::{LipDecoder, LIPDEC_NAME, LIPDEC_SEED};
pub use quat::{axis_angle_to_quat, canonicalize, quat_mul, quat_to_rotmat, rotmat_to_quat, Quat, RotMat};
pub use streams::{char_index, index_char, FaceCodes, HeadLatent, RawHeadPose, TokenSequence, ALPHABET};

/// Frame rate shared by every stream (mel hop rate).
pub const FPS: f32 = 86.0;
pub const TOKEN_DIM: usize = 29;
pub const MEL_BINS: usize = 80;
pub const HEAD_POSE_DIM: usize = 7;
pub const HEAD_LATENT_DIM: usize = 8;
pub const EXPRESSION_DIM: usize = 50;
pub const JAW_DIM: usize = 3;
pub const ROTATION_DIM: usize = 3;
/// Expression + jaw + head rotation of the conversation partner.
pub const PARTICIPANT_FEATURE_DIM: usize = EXPRESSION_DIM + JAW_DIM + ROTATION_DIM;
/// Participant features followed by participant token logits.
pub const PARTICIPANT_DIM: usize = PARTICIPANT_FEATURE_DIM + TOKEN_DIM;
