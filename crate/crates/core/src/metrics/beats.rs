use ndgrad::Tensor;

use crate::error::{Error, Result};

/// Default Gaussian width of the beat proximity kernel, in frames.
pub const DEFAULT_BEAT_SIGMA: f64 = 3.0;

/// Half-wave-rectified frame-to-frame flux summed over mel bins. Frame 0 has zero flux.
pub fn onset_strength(mel: &Tensor) -> Vec<f64> {
    let n = mel.rows();
    let mut out = vec![0.0; n];
    for i in 1..n {
        out[i] = mel
            .row(i)
            .iter()
            .zip(mel.row(i - 1))
            .map(|(&a, &b)| (a as f64 - b as f64).max(0.0))
            .sum();
    }
    out
}

/// Local maxima of onset strength rising above its mean plus one standard deviation.
pub fn audio_beats(mel: &Tensor) -> Vec<usize> {
    let f = onset_strength(mel);
    let n = f.len();
    if n < 3 {
        return Vec::new();
    }
    let mean = f.iter().sum::<f64>() / n as f64;
    let std = (f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let floor = mean + std;
    (1..n)
        .filter(|&i| f[i] > floor && f[i] > f[i - 1] && (i + 1 == n || f[i] >= f[i + 1]))
        .collect()
}

/// Per-frame speed of a motion track by central differences (one-sided at the ends).
pub fn kinetic_velocity(motion: &Tensor) -> Vec<f64> {
    let n = motion.rows();
    let dist = |a: usize, b: usize| -> f64 {
        motion
            .row(a)
            .iter()
            .zip(motion.row(b))
            .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    (0..n)
        .map(|i| match (i, n) {
            (_, 0 | 1) => 0.0,
            (0, _) => dist(1, 0),
            (i, n) if i + 1 == n => dist(i, i - 1),
            (i, _) => dist(i + 1, i - 1) / 2.0,
        })
        .collect()
}

/// Local minima of kinetic velocity.
pub fn motion_beats(motion: &Tensor) -> Vec<usize> {
    let v = kinetic_velocity(motion);
    (1..v.len().saturating_sub(1))
        .filter(|&i| v[i] <= v[i - 1] && v[i] < v[i + 1])
        .collect()
}

/// Mean Gaussian proximity of each motion beat to its nearest audio beat.
pub fn beat_align_frames(audio: &[usize], motion: &[usize], sigma: f64) -> Result<f64> {
    if motion.is_empty() {
        return Err(Error::NoMotionBeats);
    }
    if audio.is_empty() {
        // No audio beat is infinitely far away.
        return Ok(0.0);
    }
    let total: f64 = motion
        .iter()
        .map(|&b| {
            let d = audio.iter().map(|&a| a.abs_diff(b)).min().expect("nonempty") as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .sum();
    Ok(total / motion.len() as f64)
}

/// Beat-align score of a motion track against a mel spectrogram.
pub fn beat_align(mel: &Tensor, motion: &Tensor, sigma: f64) -> Result<f64> {
    if mel.rows() != motion.rows() {
        return Err(Error::LengthMismatch(mel.rows(), motion.rows()));
    }
    beat_align_frames(&audio_beats(mel), &motion_beats(motion), sigma)
}
