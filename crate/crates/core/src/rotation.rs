//! Axis-angle rotations and their derivatives.
//!
//! A rotation vector `v` with angle `θ = |v|` maps to
//! `R = I + a(t)·K + b(t)·K²` where `K = [v]×`, `t = θ²`,
//! `a = sin θ / θ` and `b = (1 - cos θ) / θ²`. Writing the coefficients as
//! functions of `t` keeps both the matrix and its Jacobian smooth at the
//! identity, where a truncated series replaces the closed forms.

use nalgebra::{Matrix3, Vector3};

/// Below this squared angle the series expansions are used.
const SERIES_THRESHOLD: f64 = 1e-3;

/// Skew-symmetric cross-product matrix `[v]×`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues coefficients `(a, b, da/dt, db/dt)` at `t = θ²`.
fn coefficients(t: f64) -> (f64, f64, f64, f64) {
    if t < SERIES_THRESHOLD {
        let a = 1.0 - t / 6.0 + t * t / 120.0 - t * t * t / 5040.0;
        let b = 0.5 - t / 24.0 + t * t / 720.0 - t * t * t / 40320.0;
        let da = -1.0 / 6.0 + t / 60.0 - t * t / 1680.0 + t * t * t / 90720.0;
        let db = -1.0 / 24.0 + t / 360.0 - t * t / 13440.0 + t * t * t / 907200.0;
        (a, b, da, db)
    } else {
        let theta = t.sqrt();
        let (s, c) = theta.sin_cos();
        let a = s / theta;
        let b = (1.0 - c) / t;
        let da = (theta * c - s) / (2.0 * t * theta);
        let db = (theta * s - 2.0 * (1.0 - c)) / (2.0 * t * t);
        (a, b, da, db)
    }
}

/// Rotation matrix of an axis-angle vector.
pub fn axis_angle_to_matrix(v: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(v);
    let (a, b, _, _) = coefficients(v.norm_squared());
    Matrix3::identity() + k * a + k * k * b
}

/// Rotation matrix together with `∂R/∂v_i` for `i = 0, 1, 2`.
pub fn axis_angle_with_jacobian(v: &Vector3<f64>) -> (Matrix3<f64>, [Matrix3<f64>; 3]) {
    let k = skew(v);
    let k2 = k * k;
    let (a, b, da, db) = coefficients(v.norm_squared());
    let r = Matrix3::identity() + k * a + k2 * b;
    let common = k * da + k2 * db;
    let jac = [0, 1, 2].map(|i| {
        let e = skew(&Vector3::ith(i, 1.0));
        common * (2.0 * v[i]) + e * a + (e * k + k * e) * b
    });
    (r, jac)
}

/// Contracts an upstream matrix adjoint `∂L/∂R` into `∂L/∂v`.
pub fn backprop_axis_angle(jac: &[Matrix3<f64>; 3], grad_r: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(jac[0].component_mul(grad_r).sum(), jac[1].component_mul(grad_r).sum(), jac[2].component_mul(grad_r).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use proptest::prelude::*;

    fn vec3() -> impl Strategy<Value = Vector3<f64>> {
        (-3.0..3.0f64, -3.0..3.0f64, -3.0..3.0f64).prop_map(|(x, y, z)| Vector3::new(x, y, z))
    }

    #[test]
    fn identity_at_zero() {
        let r = axis_angle_to_matrix(&Vector3::zeros());
        assert_eq!(r, Matrix3::identity());
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = axis_angle_to_matrix(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        let x = r * Vector3::x();
        assert!((x - Vector3::y()).norm() < 1e-15);
    }

    #[test]
    fn jacobian_at_zero_is_generator() {
        let (_, jac) = axis_angle_with_jacobian(&Vector3::zeros());
        for (i, j) in jac.iter().enumerate() {
            assert!((j - skew(&Vector3::ith(i, 1.0))).norm() < 1e-15);
        }
    }

    proptest! {
        #[test]
        fn matches_nalgebra(v in vec3()) {
            let ours = axis_angle_to_matrix(&v);
            let reference = Rotation3::new(v).into_inner();
            prop_assert!((ours - reference).norm() < 1e-12);
        }

        #[test]
        fn small_angles_match_nalgebra(v in vec3(), scale in 1e-6..0.05f64) {
            let v = v * scale;
            let ours = axis_angle_to_matrix(&v);
            let reference = Rotation3::new(v).into_inner();
            prop_assert!((ours - reference).norm() < 1e-14);
        }

        #[test]
        fn jacobian_matches_finite_differences(v in vec3(), scale in prop_oneof![Just(1.0), Just(1e-2), Just(1e-4)]) {
            let v = v * scale;
            let (_, jac) = axis_angle_with_jacobian(&v);
            let h = 1e-6;
            for i in 0..3 {
                let mut hi = v;
                let mut lo = v;
                hi[i] += h;
                lo[i] -= h;
                let fd = (axis_angle_to_matrix(&hi) - axis_angle_to_matrix(&lo)) / (2.0 * h);
                prop_assert!((fd - jac[i]).norm() < 1e-8, "component {i}: {}", (fd - jac[i]).norm());
            }
        }
    }
}
