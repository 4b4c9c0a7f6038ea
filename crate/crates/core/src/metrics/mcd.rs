use ndgrad::Tensor;

use crate::error::{Error, Result};

pub const DEFAULT_CEPSTRA: usize = 13;
/// Added to mel magnitudes before the log.
pub const MEL_LOG_EPS: f64 = 1e-5;

/// `(10 / ln 10) * sqrt(2)`.
pub fn mcd_constant() -> f64 {
    10.0 / std::f64::consts::LN_10 * std::f64::consts::SQRT_2
}

/// Orthonormal DCT-II of `log(max(mel, 0) + eps)`, keeping coefficients `1..=n_cep`.
pub fn cepstra(mel: &Tensor, n_cep: usize) -> Vec<Vec<f64>> {
    let bins = mel.last_dim();
    let basis: Vec<Vec<f64>> = (1..=n_cep)
        .map(|k| {
            let norm = (2.0 / bins as f64).sqrt();
            (0..bins)
                .map(|b| norm * (std::f64::consts::PI * k as f64 * (b as f64 + 0.5) / bins as f64).cos())
                .collect()
        })
        .collect();
    (0..mel.rows())
        .map(|i| {
            let logs: Vec<f64> = mel.row(i).iter().map(|&m| ((m as f64).max(0.0) + MEL_LOG_EPS).ln()).collect();
            basis.iter().map(|b| b.iter().zip(&logs).map(|(w, l)| w * l).sum()).collect()
        })
        .collect()
}

/// Mean frame distance along the minimum-cost DTW path.
pub fn dtw_mean_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyInput);
    }
    let (n, m) = (a.len(), b.len());
    let dist = |i: usize, j: usize| a[i].iter().zip(&b[j]).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    // (cost, steps) per cell; two rows suffice.
    let mut prev = vec![(f64::INFINITY, 0usize); m];
    let mut cur = vec![(f64::INFINITY, 0usize); m];
    for i in 0..n {
        for j in 0..m {
            let d = dist(i, j);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut c = (f64::INFINITY, 0);
                for cand in [
                    (i > 0 && j > 0).then(|| prev[j - 1]),
                    (i > 0).then(|| prev[j]),
                    (j > 0).then(|| cur[j - 1]),
                ]
                .into_iter()
                .flatten()
                {
                    if cand.0 < c.0 || (cand.0 == c.0 && cand.1 < c.1) {
                        c = cand;
                    }
                }
                c
            };
            cur[j] = (best.0 + d, best.1 + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (cost, steps) = prev[m - 1];
    Ok(cost / steps as f64)
}

/// Mel cepstral distortion with dynamic time warping.
pub fn mcd(pred: &Tensor, gt: &Tensor, n_cep: usize) -> Result<f64> {
    if pred.last_dim() != gt.last_dim() {
        return Err(Error::DimensionMismatch { expected: gt.last_dim(), got: pred.last_dim() });
    }
    Ok(mcd_constant() * dtw_mean_distance(&cepstra(pred, n_cep), &cepstra(gt, n_cep))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_stretch() {
        let mel = Tensor::new(&[5, 8], (0..40).map(|v| (v % 7) as f32 * 0.3).collect()).unwrap();
        assert_eq!(mcd(&mel, &mel, 6).unwrap(), 0.0);
        let stretched: Vec<&[f32]> = (0..10).map(|i| mel.row(i / 2)).collect();
        let stretched = Tensor::new(&[10, 8], stretched.concat()).unwrap();
        assert_eq!(mcd(&stretched, &mel, 6).unwrap(), 0.0);
        let empty = Tensor::new(&[0, 8], vec![]).unwrap();
        assert!(matches!(mcd(&empty, &mel, 6), Err(Error::EmptyInput)));
    }
}
