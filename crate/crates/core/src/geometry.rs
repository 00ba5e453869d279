//! Pinhole camera model and epipolar primitives.
//!
//! All internal math runs on normalized bearings `[x, y, 1]`. Pixel units only
//! show up in the gating distances at the bottom of this module.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Orthonormality tolerance for rotation matrices handed to [`ExtrinsicEstimate`].
pub const ROTATION_TOLERANCE: f64 = 1e-9;
/// Unit-norm tolerance for translation directions.
pub const UNIT_TOLERANCE: f64 = 1e-12;

/// Pinhole intrinsics of one camera. Pixels are assumed undistorted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// VGA camera with the given focal length and a centered principal point.
    pub fn vga(focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::InvalidInput(format!(
                "focal lengths must be positive and finite (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::InvalidInput(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Maps a bearing with unit third component back to pixels.
    pub fn project(&self, bearing: &Vector3<f64>) -> [f64; 2] {
        [
            self.fx * bearing.x / bearing.z + self.cx,
            self.fy * bearing.y / bearing.z + self.cy,
        ]
    }

    pub fn contains(&self, pixel: [f64; 2]) -> bool {
        pixel[0] >= 0.0
            && pixel[0] < self.width as f64
            && pixel[1] >= 0.0
            && pixel[1] < self.height as f64
    }
}

/// One left/right pixel correspondence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelMatch {
    pub frame_id: u64,
    pub u_l: f64,
    pub v_l: f64,
    pub u_r: f64,
    pub v_r: f64,
    /// Optional upstream matcher score (e.g. descriptor distance ratio).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

impl PixelMatch {
    pub fn new(frame_id: u64, left: [f64; 2], right: [f64; 2]) -> Self {
        Self {
            frame_id,
            u_l: left[0],
            v_l: left[1],
            u_r: right[0],
            v_r: right[1],
            score: None,
        }
    }

    pub fn left(&self) -> [f64; 2] {
        [self.u_l, self.v_l]
    }

    pub fn right(&self) -> [f64; 2] {
        [self.u_r, self.v_r]
    }

    pub fn disparity(&self) -> f64 {
        (self.u_l - self.u_r).abs()
    }

    pub fn is_finite(&self) -> bool {
        [self.u_l, self.v_l, self.u_r, self.v_r].iter().all(|v| v.is_finite())
    }
}

/// A correspondence expressed as a pair of normalized bearings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedMatch {
    pub f: Vector3<f64>,
    pub f_prime: Vector3<f64>,
    pub pixel: PixelMatch,
    pub disparity: f64,
}

impl NormalizedMatch {
    pub fn from_pixels(left: &CameraIntrinsics, right: &CameraIntrinsics, m: PixelMatch) -> Result<Self> {
        Ok(Self {
            f: normalize(left, m.left())?,
            f_prime: normalize(right, m.right())?,
            pixel: m,
            disparity: m.disparity(),
        })
    }
}

/// Relative pose of the right camera with respect to the left one,
/// `x' = R x + b t` with `|t| = 1` and a fixed baseline length `b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtrinsicEstimate {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
    baseline_length: f64,
}

impl ExtrinsicEstimate {
    /// Validating constructor. The translation is renormalized when it is
    /// already unit length up to `1e-9`, so hand-typed values are accepted.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>, baseline_length: f64) -> Result<Self> {
        if !rotation.iter().all(|v| v.is_finite()) || !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidInput("non-finite extrinsic".into()));
        }
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if ortho > ROTATION_TOLERANCE || (rotation.determinant() - 1.0).abs() > ROTATION_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "rotation is not in SO(3) (orthonormality error {ortho:e})"
            )));
        }
        let norm = translation.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!(
                "translation direction must be unit length, got norm {norm}"
            )));
        }
        if !(baseline_length > 0.0 && baseline_length.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "baseline length must be positive, got {baseline_length}"
            )));
        }
        Ok(Self {
            rotation,
            translation: translation / norm,
            baseline_length,
        })
    }

    /// Builds an estimate from a metric translation; the baseline is its norm.
    pub fn from_metric(rotation: Matrix3<f64>, translation_metric: Vector3<f64>) -> Result<Self> {
        let baseline = translation_metric.norm();
        if baseline == 0.0 || !baseline.is_finite() {
            return Err(Error::InvalidInput("metric translation must be non-zero".into()));
        }
        Self::new(rotation, translation_metric / baseline, baseline)
    }

    /// Rotation from fixed-axis X-Y-Z angles in degrees (`R = Rz * Ry * Rx`).
    pub fn from_euler_xyz_deg(angles_deg: [f64; 3], translation_metric: Vector3<f64>) -> Result<Self> {
        Self::from_metric(rotation_from_euler_xyz_deg(angles_deg), translation_metric)
    }

    /// Used by the retraction, which guarantees the invariants by construction.
    pub(crate) fn from_parts_unchecked(
        rotation: Matrix3<f64>,
        translation: Vector3<f64>,
        baseline_length: f64,
    ) -> Self {
        Self {
            rotation,
            translation,
            baseline_length,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn baseline_length(&self) -> f64 {
        self.baseline_length
    }

    pub fn translation_metric(&self) -> Vector3<f64> {
        self.translation * self.baseline_length
    }

    pub fn with_baseline(mut self, baseline_length: f64) -> Result<Self> {
        if !(baseline_length > 0.0 && baseline_length.is_finite()) {
            return Err(Error::InvalidInput("baseline length must be positive".into()));
        }
        self.baseline_length = baseline_length;
        Ok(self)
    }

    pub fn euler_xyz_deg(&self) -> [f64; 3] {
        euler_xyz_deg(&self.rotation)
    }

    /// Unit quaternion `(w, x, y, z)` with non-negative `w`.
    pub fn quaternion_wxyz(&self) -> [f64; 4] {
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation));
        let q = q.quaternion();
        let s = if q.w < 0.0 { -1.0 } else { 1.0 };
        [s * q.w, s * q.i, s * q.j, s * q.k]
    }

    /// Angle of `R_self^T R_other` in degrees.
    pub fn rotation_error_deg(&self, other: &ExtrinsicEstimate) -> f64 {
        rotation_angle(&(self.rotation.transpose() * other.rotation)).to_degrees()
    }

    /// Angle between the two unit translation directions in degrees.
    pub fn translation_error_deg(&self, other: &ExtrinsicEstimate) -> f64 {
        angle_between(&self.translation, &other.translation).to_degrees()
    }

    /// Largest deviation of `R^T R` from identity and of `|t|` from one.
    pub fn manifold_errors(&self) -> (f64, f64) {
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).abs().max();
        (ortho, (self.translation.norm() - 1.0).abs())
    }
}

/// Essential matrix `E = [t]x R`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EssentialMatrix(pub Matrix3<f64>);

impl EssentialMatrix {
    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.0
    }
}

pub fn rotation_from_euler_xyz_deg(angles_deg: [f64; 3]) -> Matrix3<f64> {
    Rotation3::from_euler_angles(
        angles_deg[0].to_radians(),
        angles_deg[1].to_radians(),
        angles_deg[2].to_radians(),
    )
    .into_inner()
}

/// Fixed-axis X-Y-Z angles in degrees, the inverse of [`rotation_from_euler_xyz_deg`].
pub fn euler_xyz_deg(rotation: &Matrix3<f64>) -> [f64; 3] {
    let (roll, pitch, yaw) = Rotation3::from_matrix_unchecked(*rotation).euler_angles();
    [roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees()]
}

pub fn rotation_angle(rotation: &Matrix3<f64>) -> f64 {
    // atan2 form stays accurate for tiny angles, where acos loses precision.
    let skew = Vector3::new(
        rotation[(2, 1)] - rotation[(1, 2)],
        rotation[(0, 2)] - rotation[(2, 0)],
        rotation[(1, 0)] - rotation[(0, 1)],
    );
    let trace = rotation.trace();
    (0.5 * skew.norm()).atan2(0.5 * (trace - 1.0))
}

pub fn angle_between(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

/// Pixel to normalized bearing `[(u - cx)/fx, (v - cy)/fy, 1]`.
pub fn normalize(k: &CameraIntrinsics, pixel: [f64; 2]) -> Result<Vector3<f64>> {
    if !pixel[0].is_finite() || !pixel[1].is_finite() {
        return Err(Error::InvalidInput(format!("non-finite pixel {pixel:?}")));
    }
    Ok(Vector3::new((pixel[0] - k.cx) / k.fx, (pixel[1] - k.cy) / k.fy, 1.0))
}

/// Cross-product matrix: `skew(a) * b == a.cross(b)`.
pub fn skew(a: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -a.z, a.y, a.z, 0.0, -a.x, -a.y, a.x, 0.0)
}

pub fn essential_from(ext: &ExtrinsicEstimate) -> EssentialMatrix {
    EssentialMatrix(skew(ext.translation()) * ext.rotation())
}

/// Signed epipolar residual `f'^T E f`.
pub fn epipolar_residual(e: &EssentialMatrix, m: &NormalizedMatch) -> f64 {
    m.f_prime.dot(&(e.0 * m.f))
}

/// Fundamental matrix `K_r^-T E K_l^-1` acting on homogeneous pixels.
pub fn fundamental_from(left: &CameraIntrinsics, right: &CameraIntrinsics, e: &EssentialMatrix) -> Matrix3<f64> {
    right.inverse_matrix().transpose() * e.0 * left.inverse_matrix()
}

/// Distance in pixels from the right pixel to the epipolar line of the left pixel.
///
/// Fails with [`Error::DegenerateGeometry`] when the line has no direction,
/// which happens when the left pixel is the epipole.
pub fn pixel_epipolar_distance(
    left: &CameraIntrinsics,
    right: &CameraIntrinsics,
    e: &EssentialMatrix,
    m: &PixelMatch,
) -> Result<f64> {
    let f = fundamental_from(left, right, e);
    let line = f * Vector3::new(m.u_l, m.v_l, 1.0);
    let norm = line.x.hypot(line.y);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::degenerate("epipolar line is undefined for this match"));
    }
    Ok((line.x * m.u_r + line.y * m.v_r + line.z).abs() / norm)
}

/// Sampson distance in pixels for a pixel-space fundamental matrix.
pub fn sampson_distance(f: &Matrix3<f64>, m: &PixelMatch) -> f64 {
    let x = Vector3::new(m.u_l, m.v_l, 1.0);
    let xp = Vector3::new(m.u_r, m.v_r, 1.0);
    let fx = f * x;
    let ftxp = f.transpose() * xp;
    let denom = fx.x * fx.x + fx.y * fx.y + ftxp.x * ftxp.x + ftxp.y * ftxp.y;
    if denom <= 0.0 {
        return f64::INFINITY;
    }
    xp.dot(&fx).abs() / denom.sqrt()
}
