use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndgrad::Tensor;

use crate::error::{Error, Result};

/// Diagonal loading used when a covariance has fewer samples than dimensions.
pub const COVARIANCE_RIDGE: f64 = 1e-6;
const EIGEN_CLAMP: f64 = -1e-8;

/// Mean and covariance of rows pooled from every tensor.
pub fn fit_gaussian(samples: &[&Tensor]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = samples.first().ok_or(Error::EmptyInput)?.last_dim();
    let mut n = 0usize;
    let mut mean = DVector::zeros(d);
    for t in samples {
        if t.last_dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: t.last_dim() });
        }
        for i in 0..t.rows() {
            for (m, &v) in mean.iter_mut().zip(t.row(i)) {
                *m += v as f64;
            }
            n += 1;
        }
    }
    if n < 2 {
        return Err(Error::TooFewSamples { need: 2, got: n });
    }
    mean /= n as f64;
    let mut cov = DMatrix::zeros(d, d);
    let mut x = DVector::zeros(d);
    for t in samples {
        for i in 0..t.rows() {
            for (k, &v) in t.row(i).iter().enumerate() {
                x[k] = v as f64 - mean[k];
            }
            cov.syger(1.0, &x, &x, 1.0);
        }
    }
    cov.fill_upper_triangle_with_lower_triangle();
    cov /= (n - 1) as f64;
    if n <= d {
        for k in 0..d {
            cov[(k, k)] += COVARIANCE_RIDGE;
        }
    }
    Ok((mean, cov))
}

/// Symmetric PSD square root; eigenvalues down to a tiny negative tolerance are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let scale = eig.eigenvalues.amax().max(1.0);
    let mut roots = eig.eigenvalues.clone();
    for r in roots.iter_mut() {
        if !r.is_finite() || *r < EIGEN_CLAMP * scale {
            return Err(Error::DegenerateCovariance);
        }
        *r = r.max(0.0).sqrt();
    }
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// Fréchet distance between two Gaussians.
pub fn frechet_gaussians(mu1: &DVector<f64>, s1: &DMatrix<f64>, mu2: &DVector<f64>, s2: &DMatrix<f64>) -> Result<f64> {
    let r1 = psd_sqrt(s1)?;
    // tr((S1 S2)^1/2) = tr((R1 S2 R1)^1/2) with R1 = S1^1/2, which keeps the product symmetric.
    let inner = psd_sqrt(&(&r1 * s2 * &r1))?;
    let d = (mu1 - mu2).norm_squared() + s1.trace() + s2.trace() - 2.0 * inner.trace();
    if !d.is_finite() {
        return Err(Error::DegenerateCovariance);
    }
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussians fitted to per-frame codes pooled across sequences.
pub fn frechet_expression_distance(pred: &[&Tensor], gt: &[&Tensor]) -> Result<f64> {
    let (m1, s1) = fit_gaussian(pred)?;
    let (m2, s2) = fit_gaussian(gt)?;
    if m1.len() != m2.len() {
        return Err(Error::DimensionMismatch { expected: m2.len(), got: m1.len() });
    }
    frechet_gaussians(&m1, &s1, &m2, &s2)
}
