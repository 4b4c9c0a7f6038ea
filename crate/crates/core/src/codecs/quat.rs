use crate::error::{Error, Result};

/// `(w, x, y, z)`
pub type Quat = [f64; 4];
pub type RotMat = [[f64; 3]; 3];

const ROTATION_TOL: f64 = 1e-4;

/// Flips the sign so that `w >= 0` (q and -q are the same rotation).
pub fn canonicalize(q: Quat) -> Quat {
    if q[0] < 0.0 {
        [-q[0], -q[1], -q[2], -q[3]]
    } else {
        q
    }
}

fn det3(r: &RotMat) -> f64 {
    r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
        + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
}

fn orthogonality_error(r: &RotMat) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..3 {
        for j in 0..3 {
            let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
            let want = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((dot - want).abs());
        }
    }
    worst
}

/// Converts a rotation matrix to a unit quaternion with `w >= 0`
/// (Shepperd's method: pivot on the largest diagonal combination).
pub fn rotmat_to_quat(r: &RotMat) -> Result<Quat> {
    let orth = orthogonality_error(r);
    let det = det3(r);
    if orth > ROTATION_TOL || (det - 1.0).abs() > ROTATION_TOL * 10.0 {
        return Err(Error::NotARotation { orth, det });
    }
    let trace = r[0][0] + r[1][1] + r[2][2];
    let q = if trace > r[0][0].max(r[1][1]).max(r[2][2]) {
        let s = (1.0 + trace).sqrt() * 2.0;
        [0.25 * s, (r[2][1] - r[1][2]) / s, (r[0][2] - r[2][0]) / s, (r[1][0] - r[0][1]) / s]
    } else if r[0][0] >= r[1][1] && r[0][0] >= r[2][2] {
        let s = (1.0 + r[0][0] - r[1][1] - r[2][2]).sqrt() * 2.0;
        [(r[2][1] - r[1][2]) / s, 0.25 * s, (r[0][1] + r[1][0]) / s, (r[0][2] + r[2][0]) / s]
    } else if r[1][1] >= r[2][2] {
        let s = (1.0 + r[1][1] - r[0][0] - r[2][2]).sqrt() * 2.0;
        [(r[0][2] - r[2][0]) / s, (r[0][1] + r[1][0]) / s, 0.25 * s, (r[1][2] + r[2][1]) / s]
    } else {
        let s = (1.0 + r[2][2] - r[0][0] - r[1][1]).sqrt() * 2.0;
        [(r[1][0] - r[0][1]) / s, (r[0][2] + r[2][0]) / s, (r[1][2] + r[2][1]) / s, 0.25 * s]
    };
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(canonicalize([q[0] / norm, q[1] / norm, q[2] / norm, q[3] / norm]))
}

pub fn quat_to_rotmat(q: &Quat) -> RotMat {
    let [w, x, y, z] = *q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Rotation of `angle` radians about the (not necessarily unit) `axis`.
pub fn axis_angle_to_quat(axis: [f64; 3], angle: f64) -> Quat {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if n < 1e-15 {
        return [1.0, 0.0, 0.0, 0.0];
    }
    let (s, c) = (angle / 2.0).sin_cos();
    [c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n]
}

/// Hamilton product `a * b`.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const I: RotMat = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    fn close(a: &Quat, b: &Quat, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn identity() {
        assert!(close(&rotmat_to_quat(&I).unwrap(), &[1.0, 0.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn half_turn_about_x() {
        let r = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(close(&rotmat_to_quat(&r).unwrap(), &[0.0, 1.0, 0.0, 0.0], 1e-12));
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = [[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        let q = rotmat_to_quat(&r).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(&q, &[h, 0.0, 0.0, h], 1e-12));
        // reconstruct R from the quaternion formula
        let back = quat_to_rotmat(&q);
        for i in 0..3 {
            for j in 0..3 {
                assert!((back[i][j] - r[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_non_rotations() {
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(matches!(rotmat_to_quat(&reflect), Err(Error::NotARotation { .. })));
        let scaled = [[2.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(rotmat_to_quat(&scaled).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_over_so3(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0, angle in 0.0f64..std::f64::consts::TAU) {
            prop_assume!(ax * ax + ay * ay + az * az > 1e-6);
            let q = axis_angle_to_quat([ax, ay, az], angle);
            let r = quat_to_rotmat(&q);
            let q2 = rotmat_to_quat(&r).unwrap();
            prop_assert!(q2[0] >= 0.0);
            let r2 = quat_to_rotmat(&q2);
            for i in 0..3 {
                for j in 0..3 {
                    prop_assert!((r[i][j] - r2[i][j]).abs() < 1e-4);
                }
            }
        }
    }
}
