//! Rigid-transform math on SE(3).
//!
//! Poses travel through the pipeline in twist coordinates `psi = [rho, theta]`
//! with the translation block first. `exp_map` turns a twist into a rotation
//! plus translation via the Rodrigues formula and the SO(3) left Jacobian:
//!
//! ```text
//! R = I + (sin a / a) [theta]x + ((1 - cos a) / a^2) [theta]x^2,   a = |theta|
//! t = V(theta) rho,   V = I + ((1-cos a)/a^2) [theta]x + ((a - sin a)/a^3) [theta]x^2
//! ```
//!
//! `log_map` inverts this. The rotation log goes through a unit quaternion
//! (largest-pivot extraction) so it stays well conditioned all the way up to
//! the singular band at a half-turn, where twist coordinates stop being
//! unique and the map refuses with [`Error::NearSingularity`].
//!
//! Everything below `|theta| = 1e-8` switches to Taylor branches so the
//! trig-over-angle ratios never divide by a denormal.

use nalgebra::{Matrix3, Vector3, Vector6};

use crate::{Error, Result};

/// Half-width of the refused band around a half-turn. Rotation logs with
/// `|theta| > pi - ANGLE_EPS` are rejected instead of returning one of the
/// two equally valid antipodal twists.
pub const ANGLE_EPS: f64 = 1e-6;

/// Below this rotation angle the closed-form coefficients switch to their
/// Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Twist coordinates of a rigid transform: translation block `rho` first,
/// rotation vector `theta` second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose6 {
    pub rho: Vector3<f64>,
    pub theta: Vector3<f64>,
}

impl Pose6 {
    pub fn new(rho: Vector3<f64>, theta: Vector3<f64>) -> Self {
        Pose6 { rho, theta }
    }

    pub fn zero() -> Self {
        Pose6 { rho: Vector3::zeros(), theta: Vector3::zeros() }
    }

    /// Packs into a 6-vector ordered `[rho, theta]`.
    pub fn to_vector(self) -> Vector6<f64> {
        Vector6::new(
            self.rho.x, self.rho.y, self.rho.z,
            self.theta.x, self.theta.y, self.theta.z,
        )
    }

    pub fn from_vector(v: Vector6<f64>) -> Self {
        Pose6 {
            rho: Vector3::new(v[0], v[1], v[2]),
            theta: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        debug_assert_eq!(v.len(), 6);
        Pose6 {
            rho: Vector3::new(v[0], v[1], v[2]),
            theta: Vector3::new(v[3], v[4], v[5]),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.rho.iter().chain(self.theta.iter()).all(|x| x.is_finite())
    }
}

/// A rotation matrix plus translation vector, the group-side twin of
/// [`Pose6`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransformMatrix {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl TransformMatrix {
    /// Builds a transform after checking that `rotation` is orthonormal with
    /// determinant +1 (both within 1e-9). Use this at trust boundaries;
    /// internal compositions of already-valid transforms stay valid.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let t = TransformMatrix { rotation, translation };
        t.validate()?;
        Ok(t)
    }

    pub fn identity() -> Self {
        TransformMatrix { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        TransformMatrix { rotation: Matrix3::identity(), translation }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.rotation.iter().all(|x| x.is_finite())
            || !self.translation.iter().all(|x| x.is_finite())
        {
            return Err(Error::invalid("transform contains non-finite entries"));
        }
        let gram = self.rotation.transpose() * self.rotation;
        let ortho_err = (gram - Matrix3::identity()).abs().max();
        if ortho_err > 1e-9 {
            return Err(Error::invalid(format!(
                "rotation is not orthonormal (deviation {ortho_err:.3e})"
            )));
        }
        let det = self.rotation.determinant();
        if (det - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("rotation determinant {det} is not +1")));
        }
        Ok(())
    }

    /// Applies the transform to a point.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Skew-symmetric cross-product matrix `[v]x`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y,
        v.z, 0.0, -v.x,
        -v.y, v.x, 0.0,
    )
}

/// Rodrigues coefficients `(sin a / a, (1 - cos a) / a^2)` with Taylor
/// fallbacks below [`SMALL_ANGLE`].
fn rodrigues_coeffs(angle: f64) -> (f64, f64) {
    if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (1.0 - a2 / 6.0, 0.5 - a2 / 24.0)
    } else {
        (angle.sin() / angle, (1.0 - angle.cos()) / (angle * angle))
    }
}

/// Rotation-only exponential: Rodrigues formula on a rotation vector.
pub fn so3_exp(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let (a, b) = rodrigues_coeffs(angle);
    let k = skew(theta);
    Matrix3::identity() + k * a + k * k * b
}

/// SO(3) left Jacobian `V(theta)`, the matrix coupling the translation block
/// of a twist to the actual translation: `t = V(theta) rho`.
pub fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let (b, c) = if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        (0.5 - a2 / 24.0, 1.0 / 6.0 - a2 / 120.0)
    } else {
        let a2 = angle * angle;
        ((1.0 - angle.cos()) / a2, (angle - angle.sin()) / (a2 * angle))
    };
    let k = skew(theta);
    Matrix3::identity() + k * b + k * k * c
}

/// Inverse of the SO(3) left Jacobian, valid for `|theta| < pi`.
pub fn so3_left_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let e = if angle < SMALL_ANGLE {
        let a2 = angle * angle;
        1.0 / 12.0 + a2 / 720.0
    } else {
        // 1/a^2 * (1 - (a/2) cot(a/2)), written with the stable half-angle form.
        let half = 0.5 * angle;
        (1.0 - half * half.cos() / half.sin()) / (angle * angle)
    };
    let k = skew(theta);
    Matrix3::identity() - k * 0.5 + k * k * e
}

/// Rotation log via unit quaternion. Numerically stable for all angles in
/// `[0, pi - ANGLE_EPS]`; refuses inside the half-turn band where the twist
/// is not unique.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>> {
    // Largest-pivot quaternion extraction: pick whichever of (w, x, y, z)
    // has the biggest squared magnitude so no branch divides by a small
    // number.
    let trace = r[(0, 0)] + r[(1, 1)] + r[(2, 2)];
    let (w, x, y, z);
    if trace > 0.0 {
        let s = (trace + 1.0).sqrt() * 2.0; // 4w
        w = 0.25 * s;
        x = (r[(2, 1)] - r[(1, 2)]) / s;
        y = (r[(0, 2)] - r[(2, 0)]) / s;
        z = (r[(1, 0)] - r[(0, 1)]) / s;
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0; // 4x
        w = (r[(2, 1)] - r[(1, 2)]) / s;
        x = 0.25 * s;
        y = (r[(0, 1)] + r[(1, 0)]) / s;
        z = (r[(0, 2)] + r[(2, 0)]) / s;
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0; // 4y
        w = (r[(0, 2)] - r[(2, 0)]) / s;
        x = (r[(0, 1)] + r[(1, 0)]) / s;
        y = 0.25 * s;
        z = (r[(1, 2)] + r[(2, 1)]) / s;
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0; // 4z
        w = (r[(1, 0)] - r[(0, 1)]) / s;
        x = (r[(0, 2)] + r[(2, 0)]) / s;
        y = (r[(1, 2)] + r[(2, 1)]) / s;
        z = 0.25 * s;
    }
    // Canonical sign: keep the scalar part non-negative so the recovered
    // angle lands in [0, pi].
    let (w, v) = if w < 0.0 {
        (-w, Vector3::new(-x, -y, -z))
    } else {
        (w, Vector3::new(x, y, z))
    };
    let vn = v.norm();
    let angle = 2.0 * vn.atan2(w);
    if angle > std::f64::consts::PI - ANGLE_EPS {
        return Err(Error::NearSingularity(format!(
            "rotation angle {angle:.9} is within {ANGLE_EPS:e} of a half-turn"
        )));
    }
    if vn < SMALL_ANGLE {
        // angle/vn -> 2/w * (1 - vn^2 / (3 w^2)) as vn -> 0.
        let scale = (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w));
        return Ok(v * scale);
    }
    Ok(v * (angle / vn))
}

/// Twist -> transform.
pub fn exp_map(psi: &Pose6) -> Result<TransformMatrix> {
    if !psi.is_finite() {
        return Err(Error::invalid("exp_map: twist contains non-finite entries"));
    }
    Ok(TransformMatrix {
        rotation: so3_exp(&psi.theta),
        translation: so3_left_jacobian(&psi.theta) * psi.rho,
    })
}

/// Transform -> twist, the inverse of [`exp_map`].
pub fn log_map(t: &TransformMatrix) -> Result<Pose6> {
    t.validate()?;
    let theta = so3_log(&t.rotation)?;
    let rho = so3_left_jacobian_inv(&theta) * t.translation;
    Ok(Pose6 { rho, theta })
}

/// Group composition `a` then-apply-after `b`: `(ab).apply(p) = a.apply(b.apply(p))`.
pub fn compose(a: &TransformMatrix, b: &TransformMatrix) -> TransformMatrix {
    TransformMatrix {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

/// Group inverse.
pub fn inverse(t: &TransformMatrix) -> TransformMatrix {
    let rot_t = t.rotation.transpose();
    TransformMatrix {
        rotation: rot_t,
        translation: -(rot_t * t.translation),
    }
}

/// Geodesic distance between two rotations:
/// `arccos((trace(r1 r2^T) - 1) / 2)`, with the cosine clamped to [-1, 1]
/// so accumulated round-off can never produce a NaN.
pub fn geodesic_so3(r1: &Matrix3<f64>, r2: &Matrix3<f64>) -> Result<f64> {
    if !r1.iter().all(|x| x.is_finite()) || !r2.iter().all(|x| x.is_finite()) {
        return Err(Error::invalid("geodesic_so3: non-finite rotation entries"));
    }
    let m = r1 * r2.transpose();
    let c = ((m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
    Ok(c.acos())
}

/// Partial derivatives of the Rodrigues rotation with respect to each
/// rotation-vector coordinate: `d R / d theta_k` for `k = 0, 1, 2`.
///
/// Closed form away from zero:
/// `dR/dtheta_k = ((theta_k [theta]x + [theta x ((I - R) e_k)]x) / a^2) R`.
/// Near zero the limit `[e_k]x` gets a first-order correction so finite
/// differences agree through the switchover.
pub fn rotation_jacobian(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let angle = theta.norm();
    let mut out = [Matrix3::zeros(); 3];
    if angle < 1e-7 {
        let k = skew(theta);
        for (i, e) in basis().iter().enumerate() {
            let ek = skew(e);
            out[i] = ek + (ek * k + k * ek) * 0.5;
        }
        return out;
    }
    let r = so3_exp(theta);
    let a2 = angle * angle;
    for (i, e) in basis().iter().enumerate() {
        let v = theta.cross(&((Matrix3::identity() - r) * e));
        out[i] = (skew(theta) * theta[i] + skew(&v)) * (1.0 / a2) * r;
    }
    out
}

/// Partial derivatives of the left Jacobian with respect to each
/// rotation-vector coordinate: `d V / d theta_k`.
///
/// With `b(a) = (1 - cos a)/a^2` and `c(a) = (a - sin a)/a^3`:
/// `dV/dtheta_k = b' (theta_k/a) K + b [e_k]x + c' (theta_k/a) K^2
///              + c ([e_k]x K + K [e_k]x)`, `K = [theta]x`.
pub fn left_jacobian_jacobian(theta: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let angle = theta.norm();
    let k = skew(theta);
    let (b, c, db, dc) = if angle < 1e-4 {
        let a2 = angle * angle;
        (
            0.5 - a2 / 24.0,
            1.0 / 6.0 - a2 / 120.0,
            -angle / 12.0 + a2 * angle / 180.0,
            -angle / 60.0 + a2 * angle / 1260.0,
        )
    } else {
        let (s, co) = (angle.sin(), angle.cos());
        let a2 = angle * angle;
        (
            (1.0 - co) / a2,
            (angle - s) / (a2 * angle),
            (angle * s - 2.0 * (1.0 - co)) / (a2 * angle),
            ((1.0 - co) * angle - 3.0 * (angle - s)) / (a2 * a2),
        )
    };
    let dir = if angle < 1e-300 { Vector3::zeros() } else { theta / angle };
    let mut out = [Matrix3::zeros(); 3];
    for (i, e) in basis().iter().enumerate() {
        let ek = skew(e);
        out[i] = k * (db * dir[i]) + ek * b + k * k * (dc * dir[i]) + (ek * k + k * ek) * c;
    }
    out
}

/// Gradient of `geodesic_so3(r_fixed, R(theta))` with respect to `theta`.
///
/// Returns the zero vector at the two flat/undefined extremes (distance
/// numerically 0 or pi), which is what gradient guidance wants: no update
/// when already aligned, no update where the direction is ambiguous.
pub fn geodesic_grad(r_fixed: &Matrix3<f64>, theta: &Vector3<f64>) -> Vector3<f64> {
    let r = so3_exp(theta);
    let m = r_fixed * r.transpose();
    let c = ((m[(0, 0)] + m[(1, 1)] + m[(2, 2)] - 1.0) / 2.0).clamp(-1.0, 1.0);
    if c >= 1.0 - 1e-12 || c <= -1.0 + 1e-12 {
        return Vector3::zeros();
    }
    let dacos = -1.0 / (1.0 - c * c).sqrt();
    let dr = rotation_jacobian(theta);
    let mut g = Vector3::zeros();
    for kx in 0..3 {
        // d/dtheta_k of trace(r_fixed R^T) = trace(r_fixed dR_k^T).
        let dtrace = (r_fixed * dr[kx].transpose()).trace();
        g[kx] = dacos * 0.5 * dtrace;
    }
    g
}

fn basis() -> [Vector3<f64>; 3] {
    [Vector3::x(), Vector3::y(), Vector3::z()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn random_twist(rng: &mut ChaCha8Rng, max_angle: f64) -> Pose6 {
        let mut axis = Vector3::new(
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
            rng.gen::<f64>() - 0.5,
        );
        if axis.norm() < 1e-12 {
            axis = Vector3::x();
        }
        axis /= axis.norm();
        let angle = rng.gen::<f64>() * max_angle;
        Pose6 {
            rho: Vector3::new(
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
                rng.gen::<f64>() * 4.0 - 2.0,
            ),
            theta: axis * angle,
        }
    }

    fn max_abs(m: &Matrix3<f64>) -> f64 {
        m.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = exp_map(&Pose6::zero()).unwrap();
        assert_eq!(t.rotation, Matrix3::identity());
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        // Rodrigues with theta = (0, 0, pi/2) must give the quarter-turn
        //   [ 0 -1  0 ]
        //   [ 1  0  0 ]
        //   [ 0  0  1 ]
        let psi = Pose6::new(Vector3::zeros(), Vector3::new(0.0, 0.0, PI / 2.0));
        let t = exp_map(&psi).unwrap();
        let expected = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        assert!(max_abs(&(t.rotation - expected)) < 1e-12);
        assert_eq!(t.translation, Vector3::zeros());
    }

    #[test]
    fn exp_pure_translation_passes_through() {
        // With theta = 0 the left Jacobian is the identity, so rho is the
        // translation itself.
        let psi = Pose6::new(Vector3::new(1.0, 2.0, 3.0), Vector3::zeros());
        let t = exp_map(&psi).unwrap();
        assert_eq!(t.translation, Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(t.rotation, Matrix3::identity());
    }

    #[test]
    fn log_of_identity_is_zero() {
        let psi = log_map(&TransformMatrix::identity()).unwrap();
        assert_eq!(psi.rho, Vector3::zeros());
        assert_eq!(psi.theta, Vector3::zeros());
    }

    #[test]
    fn round_trip_random_twists() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut worst = 0.0f64;
        for _ in 0..1000 {
            let psi = random_twist(&mut rng, 3.0);
            let back = log_map(&exp_map(&psi).unwrap()).unwrap();
            let diff = (back.to_vector() - psi.to_vector()).abs().max();
            worst = worst.max(diff);
        }
        assert!(worst < 1e-9, "worst round-trip error {worst:.3e}");
    }

    #[test]
    fn round_trip_survives_near_half_turn() {
        // 3.14 is inside the valid domain (pi - 1e-6) but deep in the
        // regime where a naive sin-division log would lose digits.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let mut psi = random_twist(&mut rng, 1.0);
            psi.theta *= 3.14 / psi.theta.norm();
            let back = log_map(&exp_map(&psi).unwrap()).unwrap();
            let diff = (back.to_vector() - psi.to_vector()).abs().max();
            assert!(diff < 1e-9, "near-pi round-trip error {diff:.3e}");
        }
    }

    #[test]
    fn log_refuses_half_turn_band() {
        let psi = Pose6::new(Vector3::zeros(), Vector3::new(PI - 1e-12, 0.0, 0.0));
        let t = exp_map(&psi).unwrap();
        match log_map(&t) {
            Err(Error::NearSingularity(_)) => {}
            other => panic!("expected NearSingularity, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let psi = Pose6::new(Vector3::new(f64::NAN, 0.0, 0.0), Vector3::zeros());
        assert!(matches!(exp_map(&psi), Err(Error::InvalidArgument(_))));
        let mut t = TransformMatrix::identity();
        t.translation.x = f64::INFINITY;
        assert!(matches!(log_map(&t), Err(Error::InvalidArgument(_))));
        let bad = Matrix3::identity() * f64::NAN;
        assert!(matches!(
            geodesic_so3(&bad, &Matrix3::identity()),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn compose_and_inverse_agree_with_point_action() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let a = exp_map(&random_twist(&mut rng, 2.5)).unwrap();
            let b = exp_map(&random_twist(&mut rng, 2.5)).unwrap();
            let p = Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let via_compose = compose(&a, &b).apply(&p);
            let via_chain = a.apply(&b.apply(&p));
            assert!((via_compose - via_chain).abs().max() < 1e-12);

            let round = compose(&a, &inverse(&a));
            assert!(max_abs(&(round.rotation - Matrix3::identity())) < 1e-12);
            assert!(round.translation.abs().max() < 1e-12);
        }
    }

    #[test]
    fn compose_is_associative() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let a = exp_map(&random_twist(&mut rng, 2.0)).unwrap();
            let b = exp_map(&random_twist(&mut rng, 2.0)).unwrap();
            let c = exp_map(&random_twist(&mut rng, 2.0)).unwrap();
            let left = compose(&compose(&a, &b), &c);
            let right = compose(&a, &compose(&b, &c));
            assert!(max_abs(&(left.rotation - right.rotation)) < 1e-12);
            assert!((left.translation - right.translation).abs().max() < 1e-12);
        }
    }

    #[test]
    fn geodesic_known_values() {
        let i = Matrix3::identity();
        let quarter = so3_exp(&Vector3::new(0.0, 0.0, PI / 2.0));
        let half = so3_exp(&Vector3::new(0.0, 0.0, PI));
        assert_eq!(geodesic_so3(&i, &i).unwrap(), 0.0);
        assert!((geodesic_so3(&i, &quarter).unwrap() - PI / 2.0).abs() < 1e-12);
        assert!((geodesic_so3(&i, &half).unwrap() - PI).abs() < 1e-7);
    }

    #[test]
    fn geodesic_symmetry_and_triangle_inequality() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let a = so3_exp(&random_twist(&mut rng, 3.0).theta);
            let b = so3_exp(&random_twist(&mut rng, 3.0).theta);
            let c = so3_exp(&random_twist(&mut rng, 3.0).theta);
            let dab = geodesic_so3(&a, &b).unwrap();
            let dba = geodesic_so3(&b, &a).unwrap();
            assert!((dab - dba).abs() < 1e-12);
            let dac = geodesic_so3(&a, &c).unwrap();
            let dcb = geodesic_so3(&c, &b).unwrap();
            assert!(dab <= dac + dcb + 1e-12);
        }
    }

    #[test]
    fn left_jacobian_times_inverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..200 {
            let theta = random_twist(&mut rng, 3.0).theta;
            let prod = so3_left_jacobian(&theta) * so3_left_jacobian_inv(&theta);
            assert!(max_abs(&(prod - Matrix3::identity())) < 1e-10);
        }
    }

    #[test]
    fn rotation_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let h = 1e-6;
        for _ in 0..50 {
            let theta = {
                let mut t = random_twist(&mut rng, 2.8).theta;
                if t.norm() < 0.1 {
                    t = Vector3::new(0.3, -0.2, 0.5);
                }
                t
            };
            let jac = rotation_jacobian(&theta);
            for k in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                let fd = (so3_exp(&tp) - so3_exp(&tm)) / (2.0 * h);
                let denom = max_abs(&fd).max(1e-6);
                let rel = max_abs(&(jac[k] - fd)) / denom;
                assert!(rel < 1e-5, "rotation jacobian axis {k} rel err {rel:.3e}");
            }
        }
    }

    #[test]
    fn left_jacobian_jacobian_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let h = 1e-6;
        for _ in 0..50 {
            let theta = {
                let mut t = random_twist(&mut rng, 2.8).theta;
                if t.norm() < 0.1 {
                    t = Vector3::new(-0.4, 0.1, 0.6);
                }
                t
            };
            let jac = left_jacobian_jacobian(&theta);
            for k in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                let fd = (so3_left_jacobian(&tp) - so3_left_jacobian(&tm)) / (2.0 * h);
                let denom = max_abs(&fd).max(1e-6);
                let rel = max_abs(&(jac[k] - fd)) / denom;
                assert!(rel < 1e-5, "left jacobian derivative axis {k} rel err {rel:.3e}");
            }
        }
    }

    #[test]
    fn geodesic_grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let h = 1e-6;
        for _ in 0..50 {
            // Keep both the base rotation and the measured distance away
            // from the flat points at 0 and pi.
            let r_fixed = so3_exp(&random_twist(&mut rng, 2.0).theta);
            let mut theta = random_twist(&mut rng, 2.0).theta;
            let dist = geodesic_so3(&r_fixed, &so3_exp(&theta)).unwrap();
            if dist < 0.2 || dist > 2.9 {
                theta = Vector3::new(0.5, 0.2, -0.3);
            }
            let g = geodesic_grad(&r_fixed, &theta);
            let mut fd = Vector3::zeros();
            for k in 0..3 {
                let mut tp = theta;
                let mut tm = theta;
                tp[k] += h;
                tm[k] -= h;
                let fp = geodesic_so3(&r_fixed, &so3_exp(&tp)).unwrap();
                let fm = geodesic_so3(&r_fixed, &so3_exp(&tm)).unwrap();
                fd[k] = (fp - fm) / (2.0 * h);
            }
            let rel = (g - fd).norm() / fd.norm().max(1e-8);
            assert!(rel < 1e-5, "geodesic gradient rel err {rel:.3e}");
        }
    }

    #[test]
    fn geodesic_grad_is_zero_when_aligned() {
        let theta = Vector3::new(0.4, -0.1, 0.7);
        let r = so3_exp(&theta);
        assert_eq!(geodesic_grad(&r, &theta), Vector3::zeros());
    }

    #[test]
    fn pose6_vector_round_trip() {
        let psi = Pose6::new(Vector3::new(0.1, 0.2, 0.3), Vector3::new(-0.4, 0.5, -0.6));
        assert_eq!(Pose6::from_vector(psi.to_vector()), psi);
    }
}
