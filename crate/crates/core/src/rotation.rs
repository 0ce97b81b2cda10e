//! Axis-angle rotations.

pub type Mat3 = [[f64; 3]; 3];

const SMALL_ANGLE: f64 = 1e-8;

/// Rodrigues' formula. Below `1e-8` rad the second-order expansion
/// `I + K + K^2 / 2` is used, where `K` is the skew matrix of `r`.
pub fn axis_angle_to_matrix(r: [f64; 3]) -> Mat3 {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    let k = skew(r);
    let k2 = mat_mul(&k, &k);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0, 0.5)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / (theta * theta))
    };
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let id = if i == j { 1.0 } else { 0.0 };
            out[i][j] = id + a * k[i][j] + b * k2[i][j];
        }
    }
    out
}

/// Geodesic angle of `R(r_t) R(r_prev)^T`, in `[0, pi]`.
///
/// Evaluated as `atan2(sin, cos)` with `cos = (tr - 1) / 2` and `sin` taken
/// from the skew-symmetric part. This is the same angle as
/// `acos(clamp((tr - 1) / 2))` but stays accurate near 0 and pi.
pub fn relative_rotation_angle(r_t: [f64; 3], r_prev: [f64; 3]) -> f64 {
    let a = axis_angle_to_matrix(r_t);
    let b = axis_angle_to_matrix(r_prev);
    let rel = mat_mul_bt(&a, &b);
    rotation_angle(&rel)
}

pub fn rotation_angle(m: &Mat3) -> f64 {
    let cos = ((m[0][0] + m[1][1] + m[2][2] - 1.0) / 2.0).clamp(-1.0, 1.0);
    let vx = m[2][1] - m[1][2];
    let vy = m[0][2] - m[2][0];
    let vz = m[1][0] - m[0][1];
    let sin = 0.5 * (vx * vx + vy * vy + vz * vz).sqrt();
    sin.atan2(cos)
}

fn skew(r: [f64; 3]) -> Mat3 {
    [[0.0, -r[2], r[1]], [r[2], 0.0, -r[0]], [-r[1], r[0], 0.0]]
}

pub fn mat_mul(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    out
}

/// `a * b^T`
fn mat_mul_bt(a: &Mat3, b: &Mat3) -> Mat3 {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = (0..3).map(|k| a[i][k] * b[j][k]).sum();
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    type Quat = [f64; 4];

    fn quat(r: [f64; 3]) -> Quat {
        let th = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if th == 0.0 {
            return [1.0, 0.0, 0.0, 0.0];
        }
        let s = (th / 2.0).sin() / th;
        [(th / 2.0).cos(), r[0] * s, r[1] * s, r[2] * s]
    }

    fn quat_to_matrix(q: Quat) -> Mat3 {
        let [w, x, y, z] = q;
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    fn assert_close(a: &Mat3, b: &Mat3, tol: f64) {
        for i in 0..3 {
            for j in 0..3 {
                assert!((a[i][j] - b[i][j]).abs() < tol, "{a:?} vs {b:?}");
            }
        }
    }

    #[test]
    fn zero_vector_is_identity() {
        let id = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert_eq!(axis_angle_to_matrix([0.0; 3]), id);
    }

    #[test]
    fn half_turn_about_x() {
        let m = axis_angle_to_matrix([PI, 0.0, 0.0]);
        assert_close(
            &m,
            &[[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, -1.0]],
            1e-12,
        );
    }

    #[test]
    fn matches_quaternion_oracle() {
        let r = [0.1, 0.2, 0.3];
        assert_close(&axis_angle_to_matrix(r), &quat_to_matrix(quat(r)), 1e-12);
    }

    #[test]
    fn taylor_branch_is_continuous() {
        let tiny = [3e-9, -2e-9, 1e-9];
        assert_close(&axis_angle_to_matrix(tiny), &quat_to_matrix(quat(tiny)), 1e-15);
    }

    #[test]
    fn simple_angles() {
        assert_eq!(relative_rotation_angle([0.3, -0.2, 0.1], [0.3, -0.2, 0.1]), 0.0);
        let a = relative_rotation_angle([0.0, 0.0, PI / 2.0], [0.0; 3]);
        assert!((a - PI / 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn orthonormal_with_unit_determinant(
            x in -4.0..4.0f64, y in -4.0..4.0f64, z in -4.0..4.0f64
        ) {
            let m = axis_angle_to_matrix([x, y, z]);
            let mtm = mat_mul_bt(&m, &m);
            for i in 0..3 {
                for j in 0..3 {
                    let id = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((mtm[i][j] - id).abs() < 1e-12);
                }
            }
            let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
            prop_assert!((det - 1.0).abs() < 1e-12);
        }

        #[test]
        fn angle_is_symmetric_and_left_invariant(
            a in proptest::array::uniform3(-2.0..2.0f64),
            b in proptest::array::uniform3(-2.0..2.0f64),
            g in proptest::array::uniform3(-2.0..2.0f64),
        ) {
            let ab = relative_rotation_angle(a, b);
            prop_assert!((ab - relative_rotation_angle(b, a)).abs() < 1e-12);
            prop_assert!((0.0..=PI).contains(&ab));
            // Left-multiplying both frames by a fixed rotation keeps the angle.
            let rg = axis_angle_to_matrix(g);
            let ga = mat_mul(&rg, &axis_angle_to_matrix(a));
            let gb = mat_mul(&rg, &axis_angle_to_matrix(b));
            prop_assert!((rotation_angle(&mat_mul_bt(&ga, &gb)) - ab).abs() < 1e-9);
        }
    }
}
