//! First-order covariance of the 5-DOF estimate and the termination signal.

use nalgebra::{Matrix3, Matrix5, SymmetricEigen, Vector5};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, EssentialMatrix, NormalizedMatch};

/// Default termination threshold on the largest covariance eigenvalue,
/// roughly a 0.05 degree standard deviation.
pub const DEFAULT_LAMBDA_THRESHOLD: f64 = 7.6e-7;

/// Information matrices whose smallest eigenvalue falls below this fraction of
/// the largest are treated as singular.
const SINGULAR_RATIO: f64 = 1e-12;

/// Isotropic pixel noise mapped onto normalized bearings of both cameras.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseModel {
    pub sigma_px: f64,
    pub sigma_f_left: Matrix3<f64>,
    pub sigma_f_right: Matrix3<f64>,
}

impl NoiseModel {
    /// `diag((sigma/fx)^2, (sigma/fy)^2, 0)` per camera.
    pub fn from_pixels(sigma_px: f64, left: &CameraIntrinsics, right: &CameraIntrinsics) -> Result<Self> {
        if !(sigma_px >= 0.0 && sigma_px.is_finite()) {
            return Err(Error::InvalidInput(format!("pixel noise must be >= 0, got {sigma_px}")));
        }
        let diag = |k: &CameraIntrinsics| {
            Matrix3::from_diagonal(&nalgebra::Vector3::new(
                (sigma_px / k.fx).powi(2),
                (sigma_px / k.fy).powi(2),
                0.0,
            ))
        };
        Ok(Self {
            sigma_px,
            sigma_f_left: diag(left),
            sigma_f_right: diag(right),
        })
    }

    pub fn noiseless() -> Self {
        Self {
            sigma_px: 0.0,
            sigma_f_left: Matrix3::zeros(),
            sigma_f_right: Matrix3::zeros(),
        }
    }
}

/// Covariance of the error state `(dtheta, alpha, beta)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationCovariance {
    pub sigma_delta: Matrix5<f64>,
    /// Largest eigenvalue of `sigma_delta`; `+inf` when some direction is unobservable.
    pub lambda_max: f64,
    /// Set for the shared-variance approximation.
    pub approximate: bool,
}

impl CalibrationCovariance {
    /// Placeholder before any information has been gathered.
    pub fn unobservable() -> Self {
        Self {
            sigma_delta: Matrix5::zeros(),
            lambda_max: f64::INFINITY,
            approximate: false,
        }
    }

    pub fn is_observable(&self) -> bool {
        self.lambda_max.is_finite()
    }

    pub fn log10_lambda_max(&self) -> f64 {
        self.lambda_max.log10()
    }
}

/// Variance of `f'^T E f` under bearing noise, dropping the second-order
/// `df'^T E df` term.
pub fn residual_covariance(e_hat: &EssentialMatrix, m: &NormalizedMatch, noise: &NoiseModel) -> f64 {
    let e = e_hat.matrix();
    let etfp = e.transpose() * m.f_prime;
    let ef = e * m.f;
    etfp.dot(&(noise.sigma_f_left * etfp)) + ef.dot(&(noise.sigma_f_right * ef))
}

/// `(J^T Sigma_r^-1 J)^-1` for a diagonal residual covariance.
pub fn full_covariance(jacobians: &[Vector5<f64>], residual_covs: &[f64]) -> Result<CalibrationCovariance> {
    if jacobians.len() != residual_covs.len() {
        return Err(Error::InvalidInput(format!(
            "{} jacobian rows but {} residual variances",
            jacobians.len(),
            residual_covs.len()
        )));
    }
    if jacobians.len() < 5 {
        return Err(Error::InsufficientData {
            required: 5,
            got: jacobians.len(),
        });
    }
    let mut information = Matrix5::zeros();
    for (j, &c) in jacobians.iter().zip(residual_covs) {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::InvalidInput(format!("residual variance must be positive, got {c}")));
        }
        information.ger(1.0 / c, j, j, 1.0);
    }
    Ok(from_information(&information, false))
}

/// `c_r * (J^T W J)^-1`, reusing the normal matrix of the last solve.
pub fn approx_covariance(jtwj: &Matrix5<f64>, c_r: f64) -> Result<CalibrationCovariance> {
    if !(c_r > 0.0 && c_r.is_finite()) {
        return Err(Error::InvalidInput(format!("shared residual variance must be positive, got {c_r}")));
    }
    Ok(from_information(&(jtwj / c_r), true))
}

/// Inverts a symmetric information matrix through its eigen-decomposition.
/// Singular matrices yield the pseudo-inverse with `lambda_max = +inf`.
pub fn from_information(information: &Matrix5<f64>, approximate: bool) -> CalibrationCovariance {
    let sym = (information + information.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let max_eig = eig.eigenvalues.max();
    let cutoff = max_eig * SINGULAR_RATIO;

    let mut inv_vals = Vector5::zeros();
    let mut singular = !(max_eig > 0.0) || !max_eig.is_finite();
    for i in 0..5 {
        let v = eig.eigenvalues[i];
        if v > cutoff && v > 0.0 {
            inv_vals[i] = 1.0 / v;
        } else {
            singular = true;
        }
    }
    let sigma = eig.eigenvectors * Matrix5::from_diagonal(&inv_vals) * eig.eigenvectors.transpose();
    let sigma = (sigma + sigma.transpose()) * 0.5;

    let lambda_max = if singular {
        f64::INFINITY
    } else {
        SymmetricEigen::new(sigma).eigenvalues.max()
    };
    CalibrationCovariance {
        sigma_delta: sigma,
        lambda_max,
        approximate,
    }
}

/// True once the largest eigenvalue drops below `threshold`.
pub fn convergence_check(cov: &CalibrationCovariance, threshold: f64) -> bool {
    cov.lambda_max < threshold
}
