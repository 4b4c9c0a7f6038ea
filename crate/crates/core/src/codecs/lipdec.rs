use std::path::Path;

use ndgrad::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FaceCodes;
use crate::error::{Error, Result};
use crate::nn::normal_tensor;

/// Container name of the decoder matrix.
pub const LIPDEC_NAME: &str = "lipdec";
pub const LIPDEC_SEED: u64 = 0x11d_dec;

const VERTICES: usize = 4;
const UPPER: usize = 0;
const LOWER: usize = 1;
const LEFT: usize = 2;
const RIGHT: usize = 3;
const REST_WIDTH: f32 = 0.5;
const SHARED_MOTION_STD: f32 = 0.02;

/// Fixed linear map from face codes to four mouth vertices
/// (inner upper lip, inner lower lip, left corner, right corner).
///
/// Code dimension 0 opens the lips symmetrically along y, so the signed
/// vertical gap `upper.y - lower.y` equals `gain * code[0]` exactly. Code
/// dimension 1 widens the mouth corners along x. Every other dimension moves
/// all four vertices together, which leaves both distances untouched.
#[derive(Clone, Debug, PartialEq)]
pub struct LipDecoder {
    /// `[D_f + 1, V * 3]`; the last row is the bias.
    matrix: Tensor,
}

fn col(v: usize, c: usize) -> usize {
    v * 3 + c
}

impl LipDecoder {
    pub fn new(face_dim: usize, gain: f32, smile_gain: f32) -> Result<Self> {
        if face_dim < 2 {
            return Err(Error::DimensionMismatch { expected: 2, got: face_dim });
        }
        let width = VERTICES * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(LIPDEC_SEED);
        let shared = normal_tensor(&mut rng, &[face_dim, 3], SHARED_MOTION_STD);
        let mut m = vec![0.0f32; (face_dim + 1) * width];
        for d in 2..face_dim {
            for v in 0..VERTICES {
                for c in 0..3 {
                    m[d * width + col(v, c)] = shared.data()[d * 3 + c];
                }
            }
        }
        m[col(UPPER, 1)] = gain / 2.0;
        m[col(LOWER, 1)] = -gain / 2.0;
        m[width + col(LEFT, 0)] = -smile_gain / 2.0;
        m[width + col(RIGHT, 0)] = smile_gain / 2.0;
        let bias = face_dim * width;
        m[bias + col(UPPER, 2)] = 0.1;
        m[bias + col(LOWER, 2)] = 0.1;
        m[bias + col(LEFT, 0)] = -REST_WIDTH / 2.0;
        m[bias + col(RIGHT, 0)] = REST_WIDTH / 2.0;
        Ok(Self {
            matrix: Tensor::new(&[face_dim + 1, width], m)?,
        })
    }

    pub fn face_dim(&self) -> usize {
        self.matrix.rows() - 1
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn bias(&self) -> &[f32] {
        self.matrix.row(self.face_dim())
    }

    /// Lip gap per unit of code dimension 0, read back from the matrix.
    pub fn gain(&self) -> f32 {
        let r = self.matrix.row(0);
        r[col(UPPER, 1)] - r[col(LOWER, 1)]
    }

    fn check(&self, width: usize) -> Result<()> {
        if width != self.face_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.face_dim(),
                got: width,
            });
        }
        Ok(())
    }

    fn vertex_row(&self, code: &[f32]) -> Vec<f32> {
        let width = VERTICES * 3;
        let mut out: Vec<f64> = self.bias().iter().map(|&b| b as f64).collect();
        for (d, &x) in code.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &self.matrix.data()[d * width..(d + 1) * width];
            for (o, &w) in out.iter_mut().zip(row) {
                *o += x as f64 * w as f64;
            }
        }
        out.into_iter().map(|v| v as f32).collect()
    }

    /// Vertex positions, `[n, 4, 3]`.
    pub fn vertices(&self, codes: &FaceCodes) -> Result<Tensor> {
        self.check(codes.dim())?;
        let n = codes.frames();
        let mut data = Vec::with_capacity(n * VERTICES * 3);
        for i in 0..n {
            data.extend(self.vertex_row(codes.codes().row(i)));
        }
        Ok(Tensor::new(&[n, VERTICES, 3], data)?)
    }

    /// Signed vertical gap between the inner lips for one code.
    /// Negative values mean the lips are pressed together.
    pub fn lip_distance(&self, code: &[f32]) -> Result<f32> {
        self.check(code.len())?;
        let v = self.vertex_row(code);
        Ok(v[col(UPPER, 1)] - v[col(LOWER, 1)])
    }

    pub fn lip_distances(&self, codes: &FaceCodes) -> Result<Vec<f32>> {
        self.check(codes.dim())?;
        (0..codes.frames()).map(|i| self.lip_distance(codes.codes().row(i))).collect()
    }

    /// Horizontal distance between the mouth corners.
    pub fn mouth_width(&self, code: &[f32]) -> Result<f32> {
        self.check(code.len())?;
        let v = self.vertex_row(code);
        Ok(v[col(RIGHT, 0)] - v[col(LEFT, 0)])
    }

    pub fn from_tensor(matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.last_dim() != VERTICES * 3 || matrix.rows() < 3 {
            return Err(Error::DimensionMismatch {
                expected: VERTICES * 3,
                got: matrix.last_dim(),
            });
        }
        Ok(Self { matrix })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        ndgrad::checkpoint::save(path, &[(LIPDEC_NAME, &self.matrix)])?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tensors = ndgrad::checkpoint::load(path)?;
        let (_, t) = tensors
            .into_iter()
            .find(|(n, _)| n == LIPDEC_NAME)
            .ok_or(Error::ModelNotLoaded("lip decoder"))?;
        Self::from_tensor(t)
    }
}
