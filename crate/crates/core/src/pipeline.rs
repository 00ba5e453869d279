//! Per-frame ingestion and the calibration session.
//!
//! A frame goes through normalization, the prior epipolar gate, per-frame
//! RANSAC on the essential matrix and disparity-prioritized grid bucketing.
//! The buffered matches are then re-optimized, the covariance recomputed and
//! the session stops once the largest covariance eigenvalue is small enough.

use nalgebra::{Matrix3, SMatrix, SymmetricEigen, Vector3};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::covariance::{
    approx_covariance, convergence_check, full_covariance, residual_covariance, CalibrationCovariance,
    DEFAULT_LAMBDA_THRESHOLD,
};
use crate::error::{Error, Result};
use crate::geometry::{
    essential_from, fundamental_from, pixel_epipolar_distance, sampson_distance, CameraIntrinsics, EssentialMatrix,
    ExtrinsicEstimate, NormalizedMatch, PixelMatch,
};
use crate::optimizer::{information_rows, optimize, CalibrationContext, OptimizationResult, OptimizerConfig, WEIGHT_EPSILON};

const SAMPLE_SIZE: usize = 8;

/// Disparities closer than this (pixels) to the capacity boundary count as ties.
pub const DISPARITY_TIE_PX: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridConfig {
    pub cols: usize,
    pub rows: usize,
    pub cell_capacity: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            cols: 16,
            rows: 25,
            cell_capacity: 10,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.cols == 0 || self.rows == 0 || self.cell_capacity == 0 {
            return Err(Error::Config(format!("grid dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn max_matches(&self) -> usize {
        self.cols * self.rows * self.cell_capacity
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RejectionConfig {
    pub prior_gate_px: f64,
    pub ransac_threshold_px: f64,
    pub ransac_confidence: f64,
    pub ransac_max_iterations: usize,
    pub seed: u64,
    /// Matches carrying a score above this are dropped; unscored matches pass.
    pub max_score: Option<f64>,
}

impl Default for RejectionConfig {
    fn default() -> Self {
        Self {
            prior_gate_px: 20.0,
            ransac_threshold_px: 1.5,
            ransac_confidence: 0.99,
            ransac_max_iterations: 500,
            seed: 0,
            max_score: None,
        }
    }
}

impl RejectionConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.prior_gate_px > 0.0
            && self.ransac_threshold_px > 0.0
            && self.ransac_confidence > 0.0
            && self.ransac_confidence < 1.0
            && self.ransac_max_iterations >= 1;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid rejection configuration: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceMode {
    /// `(J^T Sigma_r^-1 J)^-1` with per-match residual variances.
    Full,
    /// Shared variance `c_r` (buffer mean) times the inverse robust normal matrix.
    Approximate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub optimizer: OptimizerConfig,
    pub grid: GridConfig,
    pub rejection: RejectionConfig,
    pub sigma_px: f64,
    pub lambda_threshold: f64,
    pub optimize_every: usize,
    pub covariance_mode: CovarianceMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            grid: GridConfig::default(),
            rejection: RejectionConfig::default(),
            sigma_px: 0.5,
            lambda_threshold: DEFAULT_LAMBDA_THRESHOLD,
            optimize_every: 1,
            covariance_mode: CovarianceMode::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.grid.validate()?;
        self.rejection.validate()?;
        if !(self.sigma_px >= 0.0 && self.sigma_px.is_finite()) {
            return Err(Error::Config(format!("sigma_px must be >= 0, got {}", self.sigma_px)));
        }
        if !(self.lambda_threshold > 0.0) {
            return Err(Error::Config("lambda_threshold must be positive".into()));
        }
        if self.optimize_every == 0 {
            return Err(Error::Config("optimize_every must be at least 1".into()));
        }
        Ok(())
    }
}

/// Keeps matches whose right pixel lies within `gate_px` of the epipolar line
/// predicted by `prior`. Matches with an undefined line are dropped.
pub fn prior_gate(
    prior: &ExtrinsicEstimate,
    left: &CameraIntrinsics,
    right: &CameraIntrinsics,
    matches: &[PixelMatch],
    gate_px: f64,
) -> Vec<PixelMatch> {
    let e = essential_from(prior);
    matches
        .iter()
        .filter(|m| pixel_epipolar_distance(left, right, &e, m).is_ok_and(|d| d <= gate_px))
        .copied()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult {
    /// Indices into the input slice, ascending.
    pub inliers: Vec<usize>,
    pub essential: EssentialMatrix,
    /// Fewer than half of the inputs agree with the model.
    pub low_consensus: bool,
    pub iterations: usize,
}

/// Normalized 8-point hypotheses scored by pixel Sampson distance, with the
/// adaptive iteration count `log(1 - p) / log(1 - w^8)` capped by the config.
/// The winning consensus set is refit once and the refit kept when it does not
/// lose support.
pub fn ransac_essential(
    matches: &[NormalizedMatch],
    left: &CameraIntrinsics,
    right: &CameraIntrinsics,
    cfg: &RejectionConfig,
) -> Result<RansacResult> {
    cfg.validate()?;
    let n = matches.len();
    if n < SAMPLE_SIZE {
        return Err(Error::InsufficientData {
            required: SAMPLE_SIZE,
            got: n,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let score = |e: &EssentialMatrix| -> Vec<usize> {
        let f = fundamental_from(left, right, e);
        (0..n)
            .filter(|&i| sampson_distance(&f, &matches[i].pixel) <= cfg.ransac_threshold_px)
            .collect()
    };

    let mut best: Option<(Vec<usize>, EssentialMatrix)> = None;
    let mut budget = cfg.ransac_max_iterations;
    let mut iterations = 0;
    let mut sample = Vec::with_capacity(SAMPLE_SIZE);
    while iterations < budget {
        iterations += 1;
        sample.clear();
        sample.extend(index::sample(&mut rng, n, SAMPLE_SIZE).into_iter().map(|i| matches[i]));
        let Some(e) = eight_point(&sample) else {
            continue;
        };
        let inliers = score(&e);
        if best.as_ref().is_none_or(|(b, _)| inliers.len() > b.len()) {
            let ratio = inliers.len() as f64 / n as f64;
            budget = adaptive_budget(ratio, cfg.ransac_confidence, cfg.ransac_max_iterations).max(iterations);
            best = Some((inliers, e));
        }
    }

    let (mut inliers, mut essential) =
        best.ok_or_else(|| Error::degenerate("no non-degenerate minimal sample found"))?;
    if inliers.len() >= SAMPLE_SIZE {
        let subset: Vec<NormalizedMatch> = inliers.iter().map(|&i| matches[i]).collect();
        if let Some(refit) = eight_point(&subset) {
            let refit_inliers = score(&refit);
            if refit_inliers.len() >= inliers.len() {
                inliers = refit_inliers;
                essential = refit;
            }
        }
    }
    Ok(RansacResult {
        low_consensus: 2 * inliers.len() < n,
        inliers,
        essential,
        iterations,
    })
}

fn adaptive_budget(inlier_ratio: f64, confidence: f64, cap: usize) -> usize {
    let good_sample = inlier_ratio.powi(SAMPLE_SIZE as i32);
    if good_sample >= 1.0 {
        return 1;
    }
    if good_sample <= 0.0 {
        return cap;
    }
    let k = (1.0 - confidence).ln() / (1.0 - good_sample).ln();
    if k.is_finite() {
        (k.ceil() as usize).clamp(1, cap)
    } else {
        cap
    }
}

/// Similarity that moves the centroid to the origin and the mean distance to sqrt(2).
fn conditioning(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / n, sy / n);
    let mean_dist = points.map(|(x, y)| (x - mx).hypot(y - my)).sum::<f64>() / n;
    let s = if mean_dist > 0.0 {
        std::f64::consts::SQRT_2 / mean_dist
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

/// Normalized 8-point estimate of `E` with `f'^T E f = 0`, projected onto the
/// essential manifold (singular values `1, 1, 0`).
pub fn eight_point(matches: &[NormalizedMatch]) -> Option<EssentialMatrix> {
    if matches.len() < SAMPLE_SIZE {
        return None;
    }
    let t1 = conditioning(matches.iter().map(|m| (m.f.x, m.f.y)));
    let t2 = conditioning(matches.iter().map(|m| (m.f_prime.x, m.f_prime.y)));
    let mut ata = SMatrix::<f64, 9, 9>::zeros();
    for m in matches {
        let a = t1 * m.f;
        let b = t2 * m.f_prime;
        let row = SMatrix::<f64, 9, 1>::from_column_slice(&[
            b.x * a.x,
            b.x * a.y,
            b.x,
            b.y * a.x,
            b.y * a.y,
            b.y,
            a.x,
            a.y,
            1.0,
        ]);
        ata.ger(1.0, &row, &row, 1.0);
    }
    let eig = SymmetricEigen::new(ata);
    let (min_idx, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let v = eig.eigenvectors.column(min_idx);
    let e_cond = Matrix3::new(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7], v[8]);
    let e = t2.transpose() * e_cond * t1;
    if !e.iter().all(|x| x.is_finite()) {
        return None;
    }
    let svd = e.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let projected = u * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, 0.0)) * v_t;
    Some(EssentialMatrix(projected))
}

/// Matches bucketed by the grid cell of their left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBuffer {
    pub grid: GridConfig,
    pub width: u32,
    pub height: u32,
    pub cells: Vec<Vec<NormalizedMatch>>,
    pub total_count: usize,
    /// Matches rejected because their left pixel was outside the image.
    pub out_of_bounds: usize,
}

impl FeatureBuffer {
    pub fn new(grid: GridConfig, width: u32, height: u32) -> Self {
        Self {
            grid,
            width,
            height,
            cells: vec![Vec::new(); grid.cols * grid.rows],
            total_count: 0,
            out_of_bounds: 0,
        }
    }

    pub fn cell_index(&self, u: f64, v: f64) -> Option<usize> {
        if !(u >= 0.0 && u < self.width as f64 && v >= 0.0 && v < self.height as f64) {
            return None;
        }
        let col = ((u * self.grid.cols as f64 / self.width as f64) as usize).min(self.grid.cols - 1);
        let row = ((v * self.grid.rows as f64 / self.height as f64) as usize).min(self.grid.rows - 1);
        Some(row * self.grid.cols + col)
    }

    /// All buffered matches, cell by cell.
    pub fn matches(&self) -> Vec<NormalizedMatch> {
        self.cells.iter().flatten().copied().collect()
    }

    pub fn contains_pixel(&self, m: &PixelMatch) -> bool {
        self.cells.iter().flatten().any(|b| b.pixel == *m)
    }
}

/// Counts from one [`grid_insert`] call.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InsertStats {
    pub offered: usize,
    pub kept: usize,
    pub out_of_bounds: usize,
}

/// Adds matches to their cells. Full cells keep the `cell_capacity` largest
/// disparities among old and new occupants; candidates within
/// [`DISPARITY_TIE_PX`] of the boundary disparity compete for the remaining
/// slots at random.
pub fn grid_insert(buffer: &mut FeatureBuffer, matches: &[NormalizedMatch], rng: &mut impl Rng) -> InsertStats {
    let mut stats = InsertStats {
        offered: matches.len(),
        ..Default::default()
    };
    let mut incoming: Vec<Vec<NormalizedMatch>> = vec![Vec::new(); buffer.cells.len()];
    for m in matches {
        match buffer.cell_index(m.pixel.u_l, m.pixel.v_l) {
            Some(c) => incoming[c].push(*m),
            None => stats.out_of_bounds += 1,
        }
    }
    buffer.out_of_bounds += stats.out_of_bounds;

    let capacity = buffer.grid.cell_capacity;
    for (cell, new) in buffer.cells.iter_mut().zip(incoming) {
        if new.is_empty() {
            continue;
        }
        let before = cell.len();
        let mut candidates = std::mem::take(cell);
        candidates.extend(new);
        *cell = select_by_disparity(candidates, capacity, rng);
        buffer.total_count = buffer.total_count - before + cell.len();
    }
    stats.kept = stats.offered - stats.out_of_bounds;
    stats
}

fn select_by_disparity(
    candidates: Vec<NormalizedMatch>,
    capacity: usize,
    rng: &mut impl Rng,
) -> Vec<NormalizedMatch> {
    if candidates.len() <= capacity {
        return candidates;
    }
    let mut ranked: Vec<usize> = (0..candidates.len()).collect();
    ranked.sort_by(|&a, &b| candidates[b].disparity.total_cmp(&candidates[a].disparity).then(a.cmp(&b)));
    let boundary = candidates[ranked[capacity - 1]].disparity;

    let mut keep = vec![false; candidates.len()];
    let mut ties = Vec::new();
    let mut above = 0;
    for &i in &ranked {
        let d = candidates[i].disparity;
        if d - boundary >= DISPARITY_TIE_PX {
            keep[i] = true;
            above += 1;
        } else if (d - boundary).abs() < DISPARITY_TIE_PX {
            ties.push(i);
        }
    }
    let slots = capacity - above;
    if ties.len() <= slots {
        for &i in &ties {
            keep[i] = true;
        }
    } else {
        for k in index::sample(rng, ties.len(), slots) {
            keep[ties[k]] = true;
        }
    }
    candidates
        .into_iter()
        .zip(keep)
        .filter_map(|(m, k)| k.then_some(m))
        .collect()
}

/// What happened to one frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameDiagnostics {
    pub frame_index: usize,
    pub input: usize,
    pub after_score: usize,
    pub after_prior_gate: usize,
    pub after_ransac: usize,
    pub out_of_bounds: usize,
    pub buffered: usize,
    pub low_consensus: bool,
    pub optimized: bool,
    pub iterations: usize,
    pub converged: bool,
    pub lambda_max: f64,
    pub euler_xyz_deg: [f64; 3],
    pub translation_unit: [f64; 3],
    pub error: Option<String>,
}

/// Totals over all processed frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct StageCounts {
    pub input: usize,
    pub after_score: usize,
    pub after_prior_gate: usize,
    pub after_ransac: usize,
    pub out_of_bounds: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionState {
    pub estimate: ExtrinsicEstimate,
    pub buffer: FeatureBuffer,
    pub covariance: CalibrationCovariance,
    pub frames_processed: usize,
    pub terminated: bool,
    pub counts: StageCounts,
    pub last_optimization: Option<OptimizationResult>,
    pub diagnostics: Vec<FrameDiagnostics>,
    rng: ChaCha8Rng,
}

impl SessionState {
    pub fn new(prior: ExtrinsicEstimate, left: &CameraIntrinsics, cfg: &PipelineConfig) -> Self {
        Self {
            estimate: prior,
            buffer: FeatureBuffer::new(cfg.grid, left.width, left.height),
            covariance: CalibrationCovariance::unobservable(),
            frames_processed: 0,
            terminated: false,
            counts: StageCounts::default(),
            last_optimization: None,
            diagnostics: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.rejection.seed),
        }
    }
}

/// Owns a session together with its configuration and cameras.
#[derive(Debug, Clone)]
pub struct Session {
    pub config: PipelineConfig,
    pub context: CalibrationContext,
    pub state: SessionState,
}

impl Session {
    pub fn new(
        prior: ExtrinsicEstimate,
        left: CameraIntrinsics,
        right: CameraIntrinsics,
        config: PipelineConfig,
    ) -> Result<Self> {
        config.validate()?;
        let context = CalibrationContext::new(left, right, config.sigma_px)?;
        Ok(Self {
            state: SessionState::new(prior, &left, &config),
            config,
            context,
        })
    }

    pub fn process_frame(&mut self, frame: &[PixelMatch]) {
        process_frame(&mut self.state, frame, &self.config, &self.context);
    }

    pub fn run<'a>(&mut self, frames: impl IntoIterator<Item = &'a [PixelMatch]>) {
        for frame in frames {
            self.process_frame(frame);
        }
    }
}

/// Runs one frame through the pipeline. Frame-level failures end up in the
/// diagnostics; nothing here aborts the session. After termination this is a
/// no-op.
pub fn process_frame(state: &mut SessionState, frame: &[PixelMatch], cfg: &PipelineConfig, ctx: &CalibrationContext) {
    if state.terminated {
        return;
    }
    let frame_index = state.frames_processed;
    state.frames_processed += 1;
    if frame.is_empty() {
        return;
    }
    let mut diag = FrameDiagnostics {
        frame_index,
        input: frame.len(),
        lambda_max: state.covariance.lambda_max,
        ..Default::default()
    };

    let scored: Vec<PixelMatch> = frame
        .iter()
        .filter(|m| m.is_finite())
        .filter(|m| match (cfg.rejection.max_score, m.score) {
            (Some(limit), Some(s)) => s <= limit,
            _ => true,
        })
        .copied()
        .collect();
    diag.after_score = scored.len();

    let gated = prior_gate(&state.estimate, &ctx.left, &ctx.right, &scored, cfg.rejection.prior_gate_px);
    diag.after_prior_gate = gated.len();

    let normalized: Vec<NormalizedMatch> = gated
        .iter()
        .filter_map(|m| NormalizedMatch::from_pixels(&ctx.left, &ctx.right, *m).ok())
        .collect();

    let verified = if normalized.len() >= SAMPLE_SIZE {
        let mut rejection = cfg.rejection;
        rejection.seed = frame_seed(cfg.rejection.seed, frame_index);
        match ransac_essential(&normalized, &ctx.left, &ctx.right, &rejection) {
            Ok(res) => {
                diag.low_consensus = res.low_consensus;
                res.inliers.iter().map(|&i| normalized[i]).collect()
            }
            Err(e) => {
                diag.error = Some(e.to_string());
                Vec::new()
            }
        }
    } else {
        Vec::new()
    };
    diag.after_ransac = verified.len();

    let stats = grid_insert(&mut state.buffer, &verified, &mut state.rng);
    diag.out_of_bounds = stats.out_of_bounds;
    diag.buffered = state.buffer.total_count;

    state.counts.input += diag.input;
    state.counts.after_score += diag.after_score;
    state.counts.after_prior_gate += diag.after_prior_gate;
    state.counts.after_ransac += diag.after_ransac;
    state.counts.out_of_bounds += diag.out_of_bounds;

    let due = state.frames_processed.is_multiple_of(cfg.optimize_every);
    if due && state.buffer.total_count >= cfg.optimizer.min_matches {
        diag.optimized = true;
        let snapshot = state.buffer.matches();
        match optimize(&state.estimate, &snapshot, &cfg.optimizer, ctx) {
            Ok(result) => {
                diag.iterations = result.iterations;
                diag.converged = result.converged;
                state.estimate = result.estimate;
                match estimate_covariance(&result, &snapshot, cfg.covariance_mode, ctx) {
                    Ok(cov) => state.covariance = cov,
                    Err(e) => {
                        state.covariance = CalibrationCovariance::unobservable();
                        diag.error = Some(e.to_string());
                    }
                }
                state.terminated = convergence_check(&state.covariance, cfg.lambda_threshold);
                state.last_optimization = Some(result);
            }
            Err(e) => {
                if let Error::DegenerateGeometry { best: Some(best), .. } = &e {
                    state.estimate = **best;
                }
                state.covariance = CalibrationCovariance::unobservable();
                diag.error = Some(e.to_string());
            }
        }
    }
    diag.lambda_max = state.covariance.lambda_max;
    diag.euler_xyz_deg = state.estimate.euler_xyz_deg();
    diag.translation_unit = (*state.estimate.translation()).into();
    state.diagnostics.push(diag);
}

fn frame_seed(seed: u64, frame_index: usize) -> u64 {
    seed ^ (frame_index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Covariance of an optimization result over the matches it used.
pub fn estimate_covariance(
    result: &OptimizationResult,
    matches: &[NormalizedMatch],
    mode: CovarianceMode,
    ctx: &CalibrationContext,
) -> Result<CalibrationCovariance> {
    match mode {
        CovarianceMode::Full => {
            let (rows, covs) = information_rows(&result.estimate, matches, &ctx.noise)?;
            full_covariance(&rows, &covs)
        }
        CovarianceMode::Approximate => {
            let e = essential_from(&result.estimate);
            let c_r = matches
                .iter()
                .map(|m| residual_covariance(&e, m, &ctx.noise) + WEIGHT_EPSILON)
                .sum::<f64>()
                / matches.len().max(1) as f64;
            approx_covariance(&result.robust_normal_matrix, c_r)
        }
    }
}
