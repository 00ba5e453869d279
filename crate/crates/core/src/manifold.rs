//! Tangent-space machinery for SO(3) x S2.
//!
//! Rotations are perturbed on the right, `R = R_hat * exp(dtheta)`. The
//! translation direction moves in the plane spanned by two orthonormal
//! vectors perpendicular to the current `t_hat` and is pulled back onto the
//! unit sphere after every step.

use nalgebra::{Matrix3, Vector3, Vector5};

use crate::error::{Error, Result};
use crate::geometry::{skew, ExtrinsicEstimate};

/// Orthonormal pair spanning the tangent plane of the sphere at some `t_hat`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TangentBasis {
    pub b1: Vector3<f64>,
    pub b2: Vector3<f64>,
}

/// 5-vector update `(dtheta, alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ErrorState {
    pub delta_theta: Vector3<f64>,
    pub alpha: f64,
    pub beta: f64,
}

impl ErrorState {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_vector(v: &Vector5<f64>) -> Self {
        Self {
            delta_theta: Vector3::new(v[0], v[1], v[2]),
            alpha: v[3],
            beta: v[4],
        }
    }

    pub fn to_vector(&self) -> Vector5<f64> {
        Vector5::new(
            self.delta_theta.x,
            self.delta_theta.y,
            self.delta_theta.z,
            self.alpha,
            self.beta,
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.to_vector().amax()
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }
}

/// Component of `v` along `u`.
pub fn projection(u: &Vector3<f64>, v: &Vector3<f64>) -> Result<Vector3<f64>> {
    let uu = u.dot(u);
    if uu == 0.0 || !uu.is_finite() {
        return Err(Error::InvalidInput("projection onto a zero vector".into()));
    }
    Ok(u * (u.dot(v) / uu))
}

/// Orthonormal basis of the tangent plane at `t_hat`.
///
/// The canonical axis along the largest component of `t_hat` is dropped and
/// the remaining two axes are orthogonalized by Gram-Schmidt. Ties go to the
/// lowest index. Dropping the dominant axis keeps both candidates far from
/// parallel to `t_hat`, which matters for the usual `t_hat ~ [-1, 0, 0]` rig.
pub fn finding_bases(t_hat: &Vector3<f64>) -> Result<TangentBasis> {
    if !t_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidInput("non-finite translation direction".into()));
    }
    let norm = t_hat.norm();
    if (norm - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput(format!(
            "translation direction must be unit length, got norm {norm}"
        )));
    }

    let mut idx = 0;
    if t_hat[1].abs() > t_hat[idx].abs() {
        idx = 1;
    }
    if t_hat[2].abs() > t_hat[idx].abs() {
        idx = 2;
    }

    let (b1, b2) = match idx {
        0 => (Vector3::y(), Vector3::z()),
        1 => (Vector3::x(), Vector3::z()),
        _ => (Vector3::x(), Vector3::y()),
    };

    let b1 = (b1 - projection(t_hat, &b1)?).normalize();
    let b2 = (b2 - projection(t_hat, &b2)? - projection(&b1, &b2)?).normalize();
    Ok(TangentBasis { b1, b2 })
}

/// Rodrigues exponential of a rotation vector.
pub fn exp_map(delta_theta: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = delta_theta.norm_squared();
    let k = skew(delta_theta);
    if theta2 == 0.0 {
        return Matrix3::identity();
    }
    let theta = theta2.sqrt();
    if theta < 1e-8 {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let a = theta.sin() / theta;
    let b = (1.0 - theta.cos()) / theta2;
    Matrix3::identity() + k * a + k * k * b
}

/// Applies a tangent step: `R <- R exp(dtheta)`, `t <- normalize(t + alpha b1 + beta b2)`.
pub fn retract(ext: &ExtrinsicEstimate, basis: &TangentBasis, step: &ErrorState) -> Result<ExtrinsicEstimate> {
    if !step.is_finite() {
        return Err(Error::InvalidInput("non-finite step".into()));
    }
    let rotation = ext.rotation() * exp_map(&step.delta_theta);
    let moved = ext.translation() + basis.b1 * step.alpha + basis.b2 * step.beta;
    let norm = moved.norm();
    if !(norm > 1e-12) {
        return Err(Error::StepTooLarge);
    }
    Ok(ExtrinsicEstimate::from_parts_unchecked(
        rotation,
        moved / norm,
        ext.baseline_length(),
    ))
}

/// Inverse of [`retract`] to first order: the tangent coordinates of `target`
/// relative to `base`. Used to express estimation errors in the error state.
pub fn local_coordinates(base: &ExtrinsicEstimate, basis: &TangentBasis, target: &ExtrinsicEstimate) -> ErrorState {
    let rel = base.rotation().transpose() * target.rotation();
    ErrorState {
        delta_theta: log_map(&rel),
        alpha: basis.b1.dot(target.translation()),
        beta: basis.b2.dot(target.translation()),
    }
}

/// Rotation vector of a rotation matrix (angles below pi).
pub fn log_map(rotation: &Matrix3<f64>) -> Vector3<f64> {
    let w = Vector3::new(
        rotation[(2, 1)] - rotation[(1, 2)],
        rotation[(0, 2)] - rotation[(2, 0)],
        rotation[(1, 0)] - rotation[(0, 1)],
    ) * 0.5;
    let s = w.norm();
    if s == 0.0 {
        return Vector3::zeros();
    }
    let theta = s.atan2(0.5 * (rotation.trace() - 1.0));
    w * (theta / s)
}
