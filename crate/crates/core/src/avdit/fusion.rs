use ndgrad::{ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::Session;

/// Per-block fusion parameters:
/// `y_a = x_a + [x_a; x_v] U + b`, `y_v = x_v + [x_a; x_v] V + c`.
#[derive(Clone, Debug)]
pub struct Fusion {
    pub u: ParamId,
    pub b: ParamId,
    pub v: ParamId,
    pub c: ParamId,
}

impl Fusion {
    /// Zero-initialized, so an untrained fusion is the identity.
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Result<Self> {
        Ok(Self {
            u: store.insert(format!("{name}.U"), Tensor::zeros(&[2 * width, width]))?,
            b: store.insert(format!("{name}.b"), Tensor::zeros(&[width]))?,
            v: store.insert(format!("{name}.V"), Tensor::zeros(&[2 * width, width]))?,
            c: store.insert(format!("{name}.c"), Tensor::zeros(&[width]))?,
        })
    }

    pub fn forward(&self, s: &mut Session, xa: Var, xv: Var) -> Result<(Var, Var)> {
        let (u, b, v, c) = (s.p(self.u), s.p(self.b), s.p(self.v), s.p(self.c));
        let joint = s.concat_last(&[xa, xv])?;
        let da = s.matmul(joint, u)?;
        let da = s.add(da, b)?;
        let ya = s.add(xa, da)?;
        let dv = s.matmul(joint, v)?;
        let dv = s.add(dv, c)?;
        let yv = s.add(xv, dv)?;
        Ok((ya, yv))
    }
}

/// Fusion on a fresh tape from explicit parameter values. Inputs are `[n, d]`
/// (or `[d]`), `U` and `V` are `[2d, d]`, `b` and `c` are `[d]`.
pub fn fuse(
    xa: &Tensor,
    xv: &Tensor,
    u: &Tensor,
    b: &Tensor,
    v: &Tensor,
    c: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let d = xa.last_dim();
    if xv.shape() != xa.shape() {
        return Err(Error::DimensionMismatch { expected: d, got: xv.last_dim() });
    }
    for m in [u, v] {
        if m.shape() != [2 * d, d] {
            return Err(Error::DimensionMismatch { expected: 2 * d, got: m.shape()[0] });
        }
    }
    for bias in [b, c] {
        if bias.shape() != [d] {
            return Err(Error::DimensionMismatch { expected: d, got: bias.numel() });
        }
    }
    let (xa2, xv2) = if xa.rank() == 1 {
        (xa.reshape(&[1, d])?, xv.reshape(&[1, d])?)
    } else {
        (xa.clone(), xv.clone())
    };
    let mut store = ParamStore::new();
    let f = Fusion {
        u: store.insert("U", u.clone())?,
        b: store.insert("b", b.clone())?,
        v: store.insert("V", v.clone())?,
        c: store.insert("c", c.clone())?,
    };
    let mut s = Session::new(&store);
    let (a, vv) = (s.constant(xa2), s.constant(xv2));
    let (ya, yv) = f.forward(&mut s, a, vv)?;
    let (ya, yv) = (s.value(ya).reshape(xa.shape())?, s.value(yv).reshape(xa.shape())?);
    Ok((ya, yv))
}

/// Plain-slice variant of [`fuse`] for a single frame.
pub fn fuse_values(xa: &[f32], xv: &[f32], u: &Tensor, b: &Tensor, v: &Tensor, c: &Tensor) -> Result<(Vec<f32>, Vec<f32>)> {
    let d = xa.len();
    let (ya, yv) = fuse(
        &Tensor::new(&[d], xa.to_vec())?,
        &Tensor::new(&[xv.len()], xv.to_vec())?,
        u,
        b,
        v,
        c,
    )?;
    Ok((ya.into_vec(), yv.into_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_fusion_is_identity() {
        let xa = Tensor::new(&[2, 3], vec![0.1, -2.0, 3.5, 1e-7, -0.0, 7.25]).unwrap();
        let xv = Tensor::new(&[2, 3], vec![5.0, 4.0, -3.0, 2.0, 1.0, 0.5]).unwrap();
        let z = Tensor::zeros(&[6, 3]);
        let zb = Tensor::zeros(&[3]);
        let (ya, yv) = fuse(&xa, &xv, &z, &zb, &z, &zb).unwrap();
        for (a, b) in ya.data().iter().zip(xa.data()) {
            assert_eq!(a, b);
        }
        for (a, b) in yv.data().iter().zip(xv.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn hand_evaluated_scalar_case() {
        let u = Tensor::new(&[2, 1], vec![1.0, 1.0]).unwrap();
        let z = Tensor::zeros(&[2, 1]);
        let zb = Tensor::zeros(&[1]);
        let (ya, yv) = fuse_values(&[1.0], &[2.0], &u, &zb, &z, &zb).unwrap();
        assert_eq!(ya, vec![4.0]);
        assert_eq!(yv, vec![2.0]);
    }

    #[test]
    fn width_mismatch() {
        let z = Tensor::zeros(&[4, 2]);
        let zb = Tensor::zeros(&[2]);
        let err = fuse_values(&[1.0, 2.0], &[1.0], &z, &zb, &z, &zb).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }
}
