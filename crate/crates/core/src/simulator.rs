//! Synthetic stereo correspondences with a known extrinsic.
//!
//! Points are drawn uniformly over the left image and uniformly in depth,
//! kept only when the right camera sees them too, and regenerated every frame
//! so no temporal correspondence exists between frames.

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, ExtrinsicEstimate, PixelMatch};
use crate::manifold::finding_bases;

/// Fixed-axis X-Y-Z angles (degrees) of the default rig.
pub const DEFAULT_EULER_DEG: [f64; 3] = [0.25, 0.36, 1.07];
/// Metric translation (meters) of the default rig.
pub const DEFAULT_TRANSLATION_M: [f64; 3] = [-0.1386, -0.0009, 0.0026];
/// Focal length (pixels) approximating a 140 degree diagonal field of view at VGA.
pub const DEFAULT_FOCAL_PX: f64 = 230.0;

const MAX_RESAMPLE: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub num_points_per_frame: usize,
    pub depth_min: f64,
    pub depth_max: f64,
    pub sigma_px: f64,
    pub outlier_fraction: f64,
    pub quantize_pixels: bool,
    pub seed: u64,
    pub frames: usize,
    /// Reuse one set of scene points for every frame (fresh noise only).
    pub static_scene: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_points_per_frame: 200,
            depth_min: 2.0,
            depth_max: 20.0,
            sigma_px: 0.5,
            outlier_fraction: 0.0,
            quantize_pixels: false,
            seed: 0,
            frames: 10,
            static_scene: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.depth_min > 0.0 && self.depth_min <= self.depth_max && self.depth_max.is_finite()) {
            return Err(Error::Config(format!(
                "depth range must satisfy 0 < min <= max, got [{}, {}]",
                self.depth_min, self.depth_max
            )));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) {
            return Err(Error::Config(format!(
                "outlier fraction must be in [0, 1), got {}",
                self.outlier_fraction
            )));
        }
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite()) {
            return Err(Error::Config(format!("pixel noise must be >= 0, got {}", self.sigma_px)));
        }
        Ok(())
    }

    /// Far-away scene in which translation is nearly unobservable.
    pub fn far_scene() -> Self {
        Self {
            depth_min: 500.0,
            depth_max: 1000.0,
            ..Self::default()
        }
    }

    /// Close, texture-rich scene.
    pub fn near_scene() -> Self {
        Self {
            depth_min: 0.5,
            depth_max: 3.0,
            num_points_per_frame: 300,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub extrinsic: ExtrinsicEstimate,
    pub intrinsics_left: CameraIntrinsics,
    pub intrinsics_right: CameraIntrinsics,
    /// One flag per generated match; set for injected outliers.
    pub outlier_labels: Vec<bool>,
}

impl GroundTruth {
    pub fn new(extrinsic: ExtrinsicEstimate, left: CameraIntrinsics, right: CameraIntrinsics) -> Self {
        Self {
            extrinsic,
            intrinsics_left: left,
            intrinsics_right: right,
            outlier_labels: Vec::new(),
        }
    }

    /// Two identical VGA cameras with the default rig extrinsic.
    pub fn default_rig() -> Self {
        let ext = ExtrinsicEstimate::from_euler_xyz_deg(DEFAULT_EULER_DEG, Vector3::from(DEFAULT_TRANSLATION_M))
            .expect("default rig is valid");
        let k = CameraIntrinsics::vga(DEFAULT_FOCAL_PX);
        Self::new(ext, k, k)
    }
}

/// Generated matches plus the truth they were generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub truth: GroundTruth,
    pub matches: Vec<PixelMatch>,
}

impl Dataset {
    /// Matches grouped by frame id, in order.
    pub fn frames(&self) -> Vec<Vec<PixelMatch>> {
        group_frames(&self.matches)
    }
}

pub fn group_frames(matches: &[PixelMatch]) -> Vec<Vec<PixelMatch>> {
    let mut frames: Vec<Vec<PixelMatch>> = Vec::new();
    let mut current: Option<u64> = None;
    for m in matches {
        if current != Some(m.frame_id) {
            frames.push(Vec::new());
            current = Some(m.frame_id);
        }
        frames.last_mut().expect("pushed above").push(*m);
    }
    frames
}

/// Draws `cfg.num_points_per_frame` points in the left camera frame that both
/// cameras see.
pub fn generate_scene(cfg: &SceneConfig, truth: &GroundTruth, rng: &mut impl Rng) -> Result<Vec<Vector3<f64>>> {
    cfg.validate()?;
    let k = &truth.intrinsics_left;
    let mut points = Vec::with_capacity(cfg.num_points_per_frame);
    for _ in 0..cfg.num_points_per_frame {
        let mut tries = 0;
        loop {
            let u = rng.random_range(0.0..k.width as f64);
            let v = rng.random_range(0.0..k.height as f64);
            let depth = if cfg.depth_max > cfg.depth_min {
                rng.random_range(cfg.depth_min..=cfg.depth_max)
            } else {
                cfg.depth_min
            };
            let bearing = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
            let point = bearing * depth;
            if right_pixel(truth, &point).is_some_and(|p| truth.intrinsics_right.contains(p)) {
                points.push(point);
                break;
            }
            tries += 1;
            if tries >= MAX_RESAMPLE {
                return Err(Error::Config(
                    "no point visible in both cameras after 1000 draws; check the rig geometry".into(),
                ));
            }
        }
    }
    Ok(points)
}

fn right_pixel(truth: &GroundTruth, point: &Vector3<f64>) -> Option<[f64; 2]> {
    let xr = truth.extrinsic.rotation() * point + truth.extrinsic.translation_metric();
    (xr.z > 0.0).then(|| truth.intrinsics_right.project(&(xr / xr.z)))
}

/// Projects a left-frame point into both cameras, adding Gaussian pixel noise
/// and optional rounding. `None` when the point is behind either camera.
pub fn project(
    truth: &GroundTruth,
    point: &Vector3<f64>,
    sigma_px: f64,
    quantize: bool,
    frame_id: u64,
    rng: &mut impl Rng,
) -> Option<PixelMatch> {
    if point.z <= 0.0 {
        return None;
    }
    let left = truth.intrinsics_left.project(&(point / point.z));
    let right = right_pixel(truth, point)?;
    let mut px = [left[0], left[1], right[0], right[1]];
    if sigma_px > 0.0 {
        let gauss = Normal::new(0.0, sigma_px).expect("sigma is finite and positive");
        for v in &mut px {
            *v += gauss.sample(rng);
        }
    }
    if quantize {
        for v in &mut px {
            *v = v.round();
        }
    }
    Some(PixelMatch::new(frame_id, [px[0], px[1]], [px[2], px[3]]))
}

/// Replaces the right pixel of `round(fraction * n)` randomly chosen matches
/// with a uniform in-image pixel.
pub fn inject_outliers(
    matches: &[PixelMatch],
    fraction: f64,
    right: &CameraIntrinsics,
    rng: &mut impl Rng,
) -> (Vec<PixelMatch>, Vec<bool>) {
    let mut out = matches.to_vec();
    let mut labels = vec![false; matches.len()];
    let count = ((fraction * matches.len() as f64).round() as usize).min(matches.len());
    if count == 0 {
        return (out, labels);
    }
    let mut chosen: Vec<usize> = index::sample(rng, matches.len(), count).into_vec();
    chosen.sort_unstable();
    for i in chosen {
        out[i].u_r = rng.random_range(0.0..right.width as f64);
        out[i].v_r = rng.random_range(0.0..right.height as f64);
        labels[i] = true;
    }
    (out, labels)
}

/// Generates `cfg.frames` frames of matches.
pub fn simulate(cfg: &SceneConfig, truth: &GroundTruth) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut matches = Vec::with_capacity(cfg.frames * cfg.num_points_per_frame);
    let mut labels = Vec::with_capacity(matches.capacity());
    let fixed_points = if cfg.static_scene {
        Some(generate_scene(cfg, truth, &mut rng)?)
    } else {
        None
    };
    for frame in 0..cfg.frames {
        let points = match &fixed_points {
            Some(p) => p.clone(),
            None => generate_scene(cfg, truth, &mut rng)?,
        };
        let mut frame_matches = Vec::with_capacity(points.len());
        for p in &points {
            // Noise can push a pixel off the image; redraw the noise then.
            let mut tries = 0;
            loop {
                let m = project(truth, p, cfg.sigma_px, cfg.quantize_pixels, frame as u64, &mut rng)
                    .ok_or_else(|| Error::Config("generated point is not visible".into()))?;
                if truth.intrinsics_left.contains(m.left()) && truth.intrinsics_right.contains(m.right()) {
                    frame_matches.push(m);
                    break;
                }
                tries += 1;
                if tries >= MAX_RESAMPLE {
                    return Err(Error::Config("pixel noise keeps pushing a point off the image".into()));
                }
            }
        }
        let (frame_matches, frame_labels) =
            inject_outliers(&frame_matches, cfg.outlier_fraction, &truth.intrinsics_right, &mut rng);
        matches.extend(frame_matches);
        labels.extend(frame_labels);
    }
    let mut truth = truth.clone();
    truth.outlier_labels = labels;
    Ok(Dataset { truth, matches })
}

/// Truth with every fixed-axis angle offset by `rotation_deg` and the
/// translation direction tilted by `translation_deg` within its tangent plane.
pub fn perturbed_prior(truth: &ExtrinsicEstimate, rotation_deg: f64, translation_deg: f64) -> Result<ExtrinsicEstimate> {
    let mut angles = truth.euler_xyz_deg();
    for a in &mut angles {
        *a += rotation_deg;
    }
    let basis = finding_bases(truth.translation())?;
    let tilt = translation_deg.to_radians();
    let t = truth.translation() * tilt.cos() + basis.b1 * tilt.sin();
    ExtrinsicEstimate::new(
        crate::geometry::rotation_from_euler_xyz_deg(angles),
        t.normalize(),
        truth.baseline_length(),
    )
}
