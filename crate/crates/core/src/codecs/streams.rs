use ndgrad::Tensor;

use super::{HEAD_LATENT_DIM, HEAD_POSE_DIM, TOKEN_DIM};
use crate::error::{Error, Result};

/// Character set of the 29-wide token logits: blank, space, apostrophe, a-z.
pub const ALPHABET: [char; TOKEN_DIM] = [
    '_', ' ', '\'', 'a', 'b', 'c', 'd', 'e', 'f', 'g', 'h', 'i', 'j', 'k', 'l', 'm', 'n', 'o', 'p',
    'q', 'r', 's', 't', 'u', 'v', 'w', 'x', 'y', 'z',
];

pub fn char_index(c: char) -> Option<usize> {
    ALPHABET.iter().position(|&a| a == c)
}

pub fn index_char(i: usize) -> Option<char> {
    ALPHABET.get(i).copied()
}

fn require_width(t: &Tensor, width: usize) -> Result<()> {
    if t.rank() != 2 || t.last_dim() != width {
        return Err(Error::DimensionMismatch {
            expected: width,
            got: t.last_dim(),
        });
    }
    Ok(())
}

/// Per-frame character logits, `n × 29`.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence(Tensor);

impl TokenSequence {
    pub fn new(logits: Tensor) -> Result<Self> {
        require_width(&logits, TOKEN_DIM)?;
        Ok(Self(logits))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn fps(&self) -> f32 {
        super::FPS
    }

    pub fn logits(&self) -> &Tensor {
        &self.0
    }

    /// Index of the largest logit in every frame.
    pub fn argmax(&self) -> Vec<usize> {
        (0..self.frames())
            .map(|i| {
                let row = self.0.row(i);
                row.iter()
                    .enumerate()
                    .fold((0, f32::NEG_INFINITY), |best, (j, &v)| if v > best.1 { (j, v) } else { best })
                    .0
            })
            .collect()
    }
}

/// Facial dynamics codes, `n × D_f`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceCodes(Tensor);

impl FaceCodes {
    pub fn new(codes: Tensor) -> Result<Self> {
        if codes.rank() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: codes.rank() });
        }
        if !codes.is_finite() {
            return Err(Error::Grad(ndgrad::GradError::NonFinite { op: "FaceCodes::new" }));
        }
        Ok(Self(codes))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.last_dim()
    }

    pub fn codes(&self) -> &Tensor {
        &self.0
    }
}

/// Head pose per frame: unit quaternion `(w, x, y, z)` with `w >= 0`, then translation.
#[derive(Clone, Debug, PartialEq)]
pub struct RawHeadPose(Tensor);

impl RawHeadPose {
    /// Validates width and quaternion norm, and flips quaternions to `w >= 0`.
    pub fn new(pose: Tensor) -> Result<Self> {
        require_width(&pose, HEAD_POSE_DIM)?;
        let mut pose = pose;
        for row in pose.data_mut().chunks_exact_mut(HEAD_POSE_DIM) {
            let norm = row[..4].iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::InsufficientData(format!("quaternion norm {norm} is not 1")));
            }
            if row[0] < 0.0 {
                row[..4].iter_mut().for_each(|v| *v = -*v);
            }
        }
        Ok(Self(pose))
    }

    /// Renormalizes the quaternion part of arbitrary 7-wide rows.
    pub fn from_unnormalized(pose: Tensor) -> Result<Self> {
        require_width(&pose, HEAD_POSE_DIM)?;
        let mut pose = pose;
        for row in pose.data_mut().chunks_exact_mut(HEAD_POSE_DIM) {
            let mut q = [row[0] as f64, row[1] as f64, row[2] as f64, row[3] as f64];
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                q = [1.0, 0.0, 0.0, 0.0];
            } else {
                q.iter_mut().for_each(|v| *v /= norm);
            }
            let q = super::canonicalize(q);
            for (dst, src) in row[..4].iter_mut().zip(q) {
                *dst = src as f32;
            }
        }
        Ok(Self(pose))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn pose(&self) -> &Tensor {
        &self.0
    }
}

/// Head-pose VAE latents, `n × 8`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadLatent(Tensor);

impl HeadLatent {
    pub fn new(latent: Tensor) -> Result<Self> {
        require_width(&latent, HEAD_LATENT_DIM)?;
        Ok(Self(latent))
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn latent(&self) -> &Tensor {
        &self.0
    }
}
