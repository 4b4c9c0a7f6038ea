//! Evaluation metrics: lip-closure F1, Fréchet expression distance, diversity,
//! beat alignment and mel cepstral distortion.

pub mod beats;
pub mod frechet;
pub mod lips;
pub mod mcd;

use ndgrad::Tensor;
use serde::{Deserialize, Serialize};

use crate::codecs::{FaceCodes, LipDecoder};
use crate::error::{Error, Result};

pub use beats::{audio_beats, beat_align, beat_align_frames, kinetic_velocity, motion_beats, onset_strength, DEFAULT_BEAT_SIGMA};
pub use frechet::{fit_gaussian, frechet_expression_distance, frechet_gaussians, psd_sqrt};
pub use lips::{closure_frames, event_f1, event_matches, f1_from_counts, f1_lip_closures, frame_set_f1, rising_crossings, DEFAULT_CLOSURE_THRESHOLD};
pub use mcd::{cepstra, mcd, mcd_constant, DEFAULT_CEPSTRA};

/// Mean over channels of the population standard deviation of per-sequence means.
pub fn diversity(samples: &[&Tensor]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { need: 2, got: samples.len() });
    }
    let d = samples[0].last_dim();
    let mut means = Vec::with_capacity(samples.len());
    for s in samples {
        if s.last_dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.last_dim() });
        }
        if s.rows() == 0 {
            return Err(Error::EmptyInput);
        }
        let mut m = vec![0.0f64; d];
        for i in 0..s.rows() {
            for (a, &v) in m.iter_mut().zip(s.row(i)) {
                *a += v as f64;
            }
        }
        m.iter_mut().for_each(|a| *a /= s.rows() as f64);
        means.push(m);
    }
    let k = means.len() as f64;
    let total: f64 = (0..d)
        .map(|c| {
            let mu = means.iter().map(|m| m[c]).sum::<f64>() / k;
            (means.iter().map(|m| (m[c] - mu).powi(2)).sum::<f64>() / k).sqrt()
        })
        .sum();
    Ok(total / d as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub closure_threshold: f32,
    pub closure_slack: usize,
    pub beat_sigma: f64,
    pub cepstra: usize,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            closure_threshold: DEFAULT_CLOSURE_THRESHOLD,
            closure_slack: 1,
            beat_sigma: DEFAULT_BEAT_SIGMA,
            cepstra: DEFAULT_CEPSTRA,
        }
    }
}

/// One sequence's streams as seen by the metrics: mel, face codes and a head motion track.
#[derive(Clone, Debug)]
pub struct EvalSequence {
    pub mel: Tensor,
    pub face: Tensor,
    pub head: Tensor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1_lips: f64,
    pub fd_e: f64,
    pub div_h: f64,
    pub div_e: f64,
    pub bc_h: f64,
    pub bc_e: f64,
    pub mcd: f64,
    pub frames: usize,
    pub sequences: usize,
    pub config: serde_json::Value,
}

impl EvalReport {
    pub fn metrics(&self) -> [(&'static str, f64); 7] {
        [
            ("f1_lips", self.f1_lips),
            ("fd_e", self.fd_e),
            ("div_h", self.div_h),
            ("div_e", self.div_e),
            ("bc_h", self.bc_h),
            ("bc_e", self.bc_e),
            ("mcd", self.mcd),
        ]
    }

    pub fn has_nan(&self) -> bool {
        self.metrics().iter().any(|(_, v)| v.is_nan())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn pretty(&self) -> String {
        let mut s = format!("{} sequences, {} frames\n", self.sequences, self.frames);
        for (name, v) in self.metrics() {
            s.push_str(&format!("  {name:<8} {v:>10.4}\n"));
        }
        s
    }
}

fn mean_of(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Beat alignment averaged over sequences that have at least one motion beat.
pub fn mean_beat_align(pairs: &[(&Tensor, &Tensor)], sigma: f64) -> Result<f64> {
    let mut scores = Vec::new();
    for (mel, motion) in pairs {
        match beat_align(mel, motion, sigma) {
            Ok(s) => scores.push(s),
            Err(Error::NoMotionBeats) => {}
            Err(e) => return Err(e),
        }
    }
    if scores.is_empty() {
        return Err(Error::NoMotionBeats);
    }
    Ok(mean_of(&scores))
}

/// Scores generated sequences against their references. Beat alignment and
/// diversity look at the generated streams only.
pub fn evaluate(
    pred: &[EvalSequence],
    gt: &[EvalSequence],
    decoder: &LipDecoder,
    cfg: &MetricsConfig,
    config_echo: serde_json::Value,
) -> Result<EvalReport> {
    if pred.len() != gt.len() {
        return Err(Error::LengthMismatch(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut f1 = Vec::new();
    let mut mcds = Vec::new();
    let mut frames = 0;
    for (p, g) in pred.iter().zip(gt) {
        let pf = FaceCodes::new(p.face.clone())?;
        let gf = FaceCodes::new(g.face.clone())?;
        f1.push(f1_lip_closures(&pf, &gf, decoder, cfg.closure_threshold, cfg.closure_slack)?);
        mcds.push(mcd(&p.mel, &g.mel, cfg.cepstra)?);
        frames += p.face.rows();
    }
    let faces: Vec<&Tensor> = pred.iter().map(|s| &s.face).collect();
    let heads: Vec<&Tensor> = pred.iter().map(|s| &s.head).collect();
    let gt_faces: Vec<&Tensor> = gt.iter().map(|s| &s.face).collect();
    let many = pred.len() >= 2;
    let div = |x: &[&Tensor]| if many { diversity(x) } else { Ok(f64::NAN) };
    let bc = |pick: fn(&EvalSequence) -> &Tensor| {
        let pairs: Vec<(&Tensor, &Tensor)> = pred.iter().map(|s| (&s.mel, pick(s))).collect();
        match mean_beat_align(&pairs, cfg.beat_sigma) {
            Err(Error::NoMotionBeats) => Ok(0.0),
            r => r,
        }
    };
    Ok(EvalReport {
        f1_lips: mean_of(&f1),
        fd_e: frechet_expression_distance(&faces, &gt_faces)?,
        div_h: div(&heads)?,
        div_e: div(&faces)?,
        bc_h: bc(|s| &s.head)?,
        bc_e: bc(|s| &s.face)?,
        mcd: mean_of(&mcds),
        frames,
        sequences: pred.len(),
        config: config_echo,
    })
}
