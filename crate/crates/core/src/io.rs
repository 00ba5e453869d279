//! File formats: the match table, JSON documents and the per-frame trace.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_euler_xyz_deg, CameraIntrinsics, ExtrinsicEstimate, PixelMatch};
use crate::pipeline::{FrameDiagnostics, PipelineConfig, StageCounts};

pub const MATCH_HEADER: &str = "frame_id,u_l,v_l,u_r,v_r";
pub const MATCH_HEADER_SCORED: &str = "frame_id,u_l,v_l,u_r,v_r,score";
pub const EULER_CONVENTION: &str = "fixed-axis X-Y-Z (roll, pitch, yaw), R = Rz(yaw) * Ry(pitch) * Rx(roll), degrees";

const QUATERNION_TOLERANCE: f64 = 1e-6;

fn display(path: &Path) -> String {
    path.display().to_string()
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|source| Error::Io {
        path: display(path),
        source,
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|source| Error::Io {
        path: display(path),
        source,
    })
}

fn data_error(path: &str, line: usize, message: impl Into<String>) -> Error {
    Error::Data {
        path: path.to_string(),
        line,
        message: message.into(),
    }
}

/// Parses a match table. `origin` names the source in error messages.
pub fn parse_matches(text: &str, origin: &str) -> Result<Vec<PixelMatch>> {
    let mut lines = text.lines().enumerate();
    let scored = match lines.next() {
        Some((_, h)) if h.trim() == MATCH_HEADER => false,
        Some((_, h)) if h.trim() == MATCH_HEADER_SCORED => true,
        Some((_, h)) => return Err(data_error(origin, 1, format!("unexpected header {h:?}"))),
        None => return Err(data_error(origin, 1, "missing header")),
    };
    let mut out = Vec::new();
    let mut last_frame = None;
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let expected = if scored { 6 } else { 5 };
        if fields.len() != expected && !(scored && fields.len() == 5) {
            return Err(data_error(
                origin,
                lineno,
                format!("expected {expected} fields, found {}", fields.len()),
            ));
        }
        let frame_id: u64 = fields[0]
            .parse()
            .map_err(|_| data_error(origin, lineno, format!("frame_id {:?} is not a non-negative integer", fields[0])))?;
        let num = |i: usize, name: &str| -> Result<f64> {
            let v: f64 = fields[i]
                .parse()
                .map_err(|_| data_error(origin, lineno, format!("{name} {:?} is not a number", fields[i])))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(data_error(origin, lineno, format!("{name} is not finite")))
            }
        };
        let mut m = PixelMatch::new(frame_id, [num(1, "u_l")?, num(2, "v_l")?], [num(3, "u_r")?, num(4, "v_r")?]);
        if fields.len() == 6 && !fields[5].is_empty() {
            m.score = Some(num(5, "score")?);
        }
        if last_frame.is_some_and(|f| frame_id < f) {
            return Err(data_error(origin, lineno, "frame ids must be non-decreasing"));
        }
        last_frame = Some(frame_id);
        out.push(m);
    }
    Ok(out)
}

/// Serializes matches with shortest round-trip float formatting.
pub fn format_matches(matches: &[PixelMatch]) -> String {
    let scored = matches.iter().any(|m| m.score.is_some());
    let mut s = String::with_capacity(48 * (matches.len() + 1));
    s.push_str(if scored { MATCH_HEADER_SCORED } else { MATCH_HEADER });
    s.push('\n');
    for m in matches {
        let _ = write!(s, "{},{:?},{:?},{:?},{:?}", m.frame_id, m.u_l, m.v_l, m.u_r, m.v_r);
        if scored {
            s.push(',');
            if let Some(score) = m.score {
                let _ = write!(s, "{score:?}");
            }
        }
        s.push('\n');
    }
    s
}

pub fn read_matches(path: &Path) -> Result<Vec<PixelMatch>> {
    parse_matches(&read_text(path)?, &display(path))
}

pub fn write_matches(path: &Path, matches: &[PixelMatch]) -> Result<()> {
    write_text(path, &format_matches(matches))
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| data_error(origin, e.line(), e.to_string()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    parse_json(&read_text(path)?, &display(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicsDocument {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
}

impl IntrinsicsDocument {
    pub fn validate(&self) -> Result<()> {
        self.left.validate()?;
        self.right.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RotationDocument {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quaternion_wxyz: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub euler_xyz_deg: Option<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub convention: Option<String>,
}

impl RotationDocument {
    pub fn from_estimate(ext: &ExtrinsicEstimate) -> Self {
        Self {
            quaternion_wxyz: Some(ext.quaternion_wxyz()),
            euler_xyz_deg: Some(ext.euler_xyz_deg()),
            convention: Some(EULER_CONVENTION.to_string()),
        }
    }
}

/// A prior or ground-truth extrinsic. A calibration report also parses as one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtrinsicDocument {
    pub rotation: RotationDocument,
    pub translation_metric: [f64; 3],
}

impl ExtrinsicDocument {
    pub fn from_estimate(ext: &ExtrinsicEstimate) -> Self {
        Self {
            rotation: RotationDocument::from_estimate(ext),
            translation_metric: ext.translation_metric().into(),
        }
    }

    /// The quaternion wins when both rotation forms are present.
    pub fn to_estimate(&self, origin: &str) -> Result<ExtrinsicEstimate> {
        let rotation = match (self.rotation.quaternion_wxyz, self.rotation.euler_xyz_deg) {
            (Some([w, x, y, z]), _) => {
                let q = Quaternion::new(w, x, y, z);
                if !((q.norm() - 1.0).abs() <= QUATERNION_TOLERANCE) {
                    return Err(data_error(origin, 0, format!("quaternion norm {} is not 1", q.norm())));
                }
                UnitQuaternion::from_quaternion(q).to_rotation_matrix().into_inner()
            }
            (None, Some(angles)) => rotation_from_euler_xyz_deg(angles),
            (None, None) => return Err(data_error(origin, 0, "rotation needs quaternion_wxyz or euler_xyz_deg")),
        };
        ExtrinsicEstimate::from_metric(rotation, Vector3::from(self.translation_metric))
            .map_err(|e| data_error(origin, 0, e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthDocument {
    #[serde(flatten)]
    pub extrinsic: ExtrinsicDocument,
    /// Zero-based data-row indices of injected outliers in the match table.
    pub outlier_rows: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub rotation: RotationDocument,
    pub translation_unit: [f64; 3],
    pub translation_metric: [f64; 3],
    pub baseline_length: f64,
    /// Error-state covariance, row-major over `(dtheta_x, dtheta_y, dtheta_z, alpha, beta)`.
    pub covariance: Vec<f64>,
    /// `null` when some direction is unobservable.
    pub lambda_max: Option<f64>,
    pub log10_lambda_max: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub terminated: bool,
    pub frames_processed: usize,
    pub buffered_matches: usize,
    pub rms_epipolar_px: f64,
    pub stage_counts: StageCounts,
    pub config: PipelineConfig,
    pub seed: u64,
}

fn finite(x: f64) -> Option<f64> {
    x.is_finite().then_some(x)
}

impl CalibrationReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        estimate: &ExtrinsicEstimate,
        covariance: &crate::covariance::CalibrationCovariance,
        iterations: usize,
        converged: bool,
        terminated: bool,
        frames_processed: usize,
        buffered_matches: usize,
        rms_epipolar_px: f64,
        stage_counts: StageCounts,
        config: PipelineConfig,
    ) -> Self {
        let cov = covariance.sigma_delta;
        Self {
            rotation: RotationDocument::from_estimate(estimate),
            translation_unit: (*estimate.translation()).into(),
            translation_metric: estimate.translation_metric().into(),
            baseline_length: estimate.baseline_length(),
            covariance: (0..5).flat_map(|r| (0..5).map(move |c| cov[(r, c)])).collect(),
            lambda_max: finite(covariance.lambda_max),
            log10_lambda_max: finite(covariance.lambda_max).map(f64::log10),
            iterations,
            converged,
            terminated,
            frames_processed,
            buffered_matches,
            rms_epipolar_px,
            stage_counts,
            seed: config.rejection.seed,
            config,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub matches: usize,
    pub rms_epipolar_px: f64,
}

pub const TRACE_HEADER: &str =
    "frame,input,after_prior_gate,after_ransac,buffered,iterations,lambda_max,log10_lambda_max,roll_deg,pitch_deg,yaw_deg,t_x,t_y,t_z";

/// One row per frame that carried matches; `inf` marks an unobservable covariance.
pub fn format_trace(diagnostics: &[FrameDiagnostics]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for d in diagnostics {
        let [r, p, y] = d.euler_xyz_deg;
        let [tx, ty, tz] = d.translation_unit;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:?},{:?},{:?},{:?},{:?},{:?},{:?},{:?}",
            d.frame_index,
            d.input,
            d.after_prior_gate,
            d.after_ransac,
            d.buffered,
            d.iterations,
            d.lambda_max,
            d.lambda_max.log10(),
            r,
            p,
            y,
            tx,
            ty,
            tz
        );
    }
    s
}
