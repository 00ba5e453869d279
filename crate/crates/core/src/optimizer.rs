//! Weighted Gauss-Newton on the 5-DOF error state.
//!
//! Each iteration linearizes `r_i = f'^T [t]x R f` around the current
//! estimate, builds the normal equations with per-match weights and applies
//! the solved step through [`retract`]. The weight of a row is the Huber
//! weight times the squared whitening factor `1 / (cov(r_i) + eps)`, so with
//! all Huber weights at one the normal matrix is the information matrix.

use std::cmp::Ordering;

use nalgebra::{Cholesky, Matrix3, Matrix5, Vector3, Vector5};
use serde::{Deserialize, Serialize};

use crate::covariance::{residual_covariance, NoiseModel};
use crate::error::{Error, Result};
use crate::geometry::{essential_from, pixel_epipolar_distance, CameraIntrinsics, ExtrinsicEstimate, NormalizedMatch};
use crate::manifold::{finding_bases, retract, ErrorState, TangentBasis};

/// Floor added to residual variances before whitening.
pub const WEIGHT_EPSILON: f64 = 1e-12;

/// Accepted steps may raise the frozen-weight cost by at most this fraction.
pub const COST_TOLERANCE: f64 = 1e-12;

const MAX_STEP_RETRIES: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    /// Huber threshold in pixels, converted with the smaller focal length.
    pub huber_threshold_px: f64,
    pub max_iterations: usize,
    /// Stop once the largest step component falls below this.
    pub step_tolerance: f64,
    pub min_matches: usize,
    pub damping: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            huber_threshold_px: 1.0,
            max_iterations: 50,
            step_tolerance: 1e-10,
            min_matches: 20,
            damping: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.huber_threshold_px > 0.0
            && self.max_iterations >= 1
            && self.step_tolerance > 0.0
            && self.min_matches >= 10
            && self.damping >= 0.0
            && self.damping.is_finite();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer configuration: {self:?}")))
        }
    }
}

/// Everything the optimizer needs besides the matches: the two cameras and
/// the bearing noise used for whitening.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationContext {
    pub left: CameraIntrinsics,
    pub right: CameraIntrinsics,
    pub noise: NoiseModel,
}

impl CalibrationContext {
    pub fn new(left: CameraIntrinsics, right: CameraIntrinsics, sigma_px: f64) -> Result<Self> {
        left.validate()?;
        right.validate()?;
        Ok(Self {
            left,
            right,
            noise: NoiseModel::from_pixels(sigma_px, &left, &right)?,
        })
    }

    /// Huber threshold in normalized units.
    pub fn huber_threshold(&self, cfg: &OptimizerConfig) -> f64 {
        let focal = self.left.fx.min(self.left.fy).min(self.right.fx).min(self.right.fy);
        cfg.huber_threshold_px / focal
    }
}

/// One linearized epipolar residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualRow {
    pub r: f64,
    pub j: Vector5<f64>,
    /// Diagonal entry of `W`.
    pub w: f64,
}

/// Accumulated weighted normal equations at one linearization point.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub jtwj: Matrix5<f64>,
    pub jtwr: Vector5<f64>,
    /// `J^T W_h J` with Huber weights only.
    pub jtj_robust: Matrix5<f64>,
    /// `sum w_i r_i^2`.
    pub cost: f64,
    pub rms_normalized: f64,
    /// Row weights, in the order of the input matches.
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost_before: f64,
    pub cost_after: f64,
    pub step_max: f64,
    pub damping: f64,
    pub estimate: ExtrinsicEstimate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationResult {
    pub estimate: ExtrinsicEstimate,
    pub iterations: usize,
    pub converged: bool,
    pub final_rms_normalized: f64,
    pub final_rms_px: f64,
    /// `J^T W J` at the returned estimate.
    pub normal_matrix: Matrix5<f64>,
    /// `J^T W_h J` at the returned estimate, Huber weights only.
    pub robust_normal_matrix: Matrix5<f64>,
    /// Accepted steps, in order.
    pub history: Vec<IterationRecord>,
}

/// Quantities shared by every row of one iteration.
struct Linearization {
    rotation: Matrix3<f64>,
    essential: Matrix3<f64>,
    basis: TangentBasis,
}

impl Linearization {
    fn new(ext: &ExtrinsicEstimate, basis: &TangentBasis) -> Self {
        Self {
            rotation: *ext.rotation(),
            essential: essential_from(ext).0,
            basis: *basis,
        }
    }

    fn row(&self, m: &NormalizedMatch) -> (f64, Vector5<f64>) {
        let etfp = self.essential.transpose() * m.f_prime;
        let r = etfp.dot(&m.f);
        // -f'^T E [f]x == (f x E^T f')^T
        let d_theta = m.f.cross(&etfp);
        let rf = self.rotation * m.f;
        let d_alpha = m.f_prime.dot(&self.basis.b1.cross(&rf));
        let d_beta = m.f_prime.dot(&self.basis.b2.cross(&rf));
        (r, Vector5::new(d_theta.x, d_theta.y, d_theta.z, d_alpha, d_beta))
    }
}

/// Residual and its Jacobian with respect to `(dtheta, alpha, beta)`.
pub fn residual_and_jacobian(
    ext: &ExtrinsicEstimate,
    basis: &TangentBasis,
    m: &NormalizedMatch,
) -> (f64, Vector5<f64>) {
    Linearization::new(ext, basis).row(m)
}

pub fn huber_weight(r: f64, c_t: f64) -> f64 {
    let a = r.abs();
    if a <= c_t {
        1.0
    } else {
        c_t / a
    }
}

/// Whitening factor `1 / sqrt(cov(r) + eps)`.
pub fn normalization_weight(ext: &ExtrinsicEstimate, m: &NormalizedMatch, noise: &NoiseModel) -> f64 {
    let cov = residual_covariance(&essential_from(ext), m, noise);
    1.0 / (cov + WEIGHT_EPSILON).sqrt()
}

fn whitening_from_cov(cov: f64) -> f64 {
    1.0 / (cov + WEIGHT_EPSILON).sqrt()
}

/// Canonical summation order: matches sorted by their bearing coordinates, so
/// accumulation does not depend on how the caller ordered them.
fn canonical_order(matches: &[NormalizedMatch]) -> Vec<usize> {
    let key = |m: &NormalizedMatch| [m.f.x, m.f.y, m.f_prime.x, m.f_prime.y];
    let mut order: Vec<usize> = (0..matches.len()).collect();
    order.sort_by(|&a, &b| {
        let (ka, kb) = (key(&matches[a]), key(&matches[b]));
        ka.iter()
            .zip(kb.iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

/// Weighted normal equations at `ext`.
pub fn assemble(
    ext: &ExtrinsicEstimate,
    basis: &TangentBasis,
    matches: &[NormalizedMatch],
    cfg: &OptimizerConfig,
    ctx: &CalibrationContext,
) -> Result<NormalEquations> {
    if matches.len() < cfg.min_matches {
        return Err(Error::InsufficientData {
            required: cfg.min_matches,
            got: matches.len(),
        });
    }
    let order = canonical_order(matches);
    Ok(assemble_ordered(ext, basis, matches, &order, ctx.huber_threshold(cfg), &ctx.noise))
}

fn assemble_ordered(
    ext: &ExtrinsicEstimate,
    basis: &TangentBasis,
    matches: &[NormalizedMatch],
    order: &[usize],
    c_t: f64,
    noise: &NoiseModel,
) -> NormalEquations {
    let lin = Linearization::new(ext, basis);
    let e = crate::geometry::EssentialMatrix(lin.essential);
    let mut jtwj = Matrix5::zeros();
    let mut jtwr = Vector5::zeros();
    let mut jtj_robust = Matrix5::zeros();
    let mut cost = 0.0;
    let mut sq = 0.0;
    let mut weights = vec![0.0; matches.len()];
    for &i in order {
        let m = &matches[i];
        let (r, j) = lin.row(m);
        let wh = huber_weight(r, c_t);
        let wn = whitening_from_cov(residual_covariance(&e, m, noise));
        let w = wh * wn * wn;
        weights[i] = w;
        jtwj.ger(w, &j, &j, 1.0);
        jtwr.axpy(w * r, &j, 1.0);
        jtj_robust.ger(wh, &j, &j, 1.0);
        cost += w * r * r;
        sq += r * r;
    }
    NormalEquations {
        jtwj,
        jtwr,
        jtj_robust,
        cost,
        rms_normalized: (sq / matches.len() as f64).sqrt(),
        weights,
    }
}

/// `sum w_i r_i^2` at `ext` with weights held fixed.
fn frozen_cost(ext: &ExtrinsicEstimate, matches: &[NormalizedMatch], order: &[usize], weights: &[f64]) -> f64 {
    let e = essential_from(ext).0;
    let mut cost = 0.0;
    for &i in order {
        let m = &matches[i];
        let r = m.f_prime.dot(&(e * m.f));
        cost += weights[i] * r * r;
    }
    cost
}

/// Solves `(J^T W J + damping I) delta = -J^T W r` by Cholesky.
///
/// When the factorization fails or is numerically singular, damping is raised
/// tenfold from `1e-9` up to `1e-3` of the mean diagonal before giving up with
/// [`Error::DegenerateGeometry`].
pub fn solve_step(jtwj: &Matrix5<f64>, jtwr: &Vector5<f64>, damping: f64) -> Result<ErrorState> {
    if !jtwj.iter().chain(jtwr.iter()).all(|v| v.is_finite()) || !damping.is_finite() {
        return Err(Error::InvalidInput("non-finite normal equations".into()));
    }
    let scale = jtwj.trace() / 5.0;
    if !(scale > 0.0) {
        return Err(Error::degenerate("normal matrix carries no information"));
    }
    let floor = scale * 1e-9;
    let ceiling = scale * 1e-3;
    let mut d = damping;
    loop {
        if let Some(step) = try_cholesky(jtwj, jtwr, d) {
            return Ok(ErrorState::from_vector(&step));
        }
        d = if d < floor { floor } else { d * 10.0 };
        if d > ceiling * (1.0 + 1e-9) {
            return Err(Error::degenerate(
                "normal equations are singular; the configuration is unobservable",
            ));
        }
    }
}

fn try_cholesky(jtwj: &Matrix5<f64>, jtwr: &Vector5<f64>, damping: f64) -> Option<Vector5<f64>> {
    let a = jtwj + Matrix5::identity() * damping;
    let chol = Cholesky::new(a)?;
    let diag = chol.l_dirty().diagonal();
    let (lo, hi) = (diag.min(), diag.max());
    if !(lo > 0.0) || (lo * lo) < 1e-15 * (hi * hi) {
        return None;
    }
    let step = chol.solve(&-jtwr);
    step.iter().all(|v| v.is_finite()).then_some(step)
}

/// Iterates bases, assembly, solve and retraction until the step is below
/// `step_tolerance` or the iteration budget runs out.
///
/// A step that raises the cost under the weights it was computed with is
/// retried with growing damping; when no damping helps, the current estimate
/// is a minimum to working precision and the loop stops.
pub fn optimize(
    prior: &ExtrinsicEstimate,
    matches: &[NormalizedMatch],
    cfg: &OptimizerConfig,
    ctx: &CalibrationContext,
) -> Result<OptimizationResult> {
    cfg.validate()?;
    if matches.len() < cfg.min_matches {
        return Err(Error::InsufficientData {
            required: cfg.min_matches,
            got: matches.len(),
        });
    }
    let c_t = ctx.huber_threshold(cfg);
    let order = canonical_order(matches);
    let mut estimate = *prior;
    let mut history = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut last: Option<NormalEquations> = None;

    'outer: for iteration in 1..=cfg.max_iterations {
        iterations = iteration;
        let basis = finding_bases(estimate.translation())?;
        let ne = assemble_ordered(&estimate, &basis, matches, &order, c_t, &ctx.noise);
        let scale = ne.jtwj.trace() / 5.0;
        let mut damping = cfg.damping;

        for _ in 0..MAX_STEP_RETRIES {
            let step = solve_step(&ne.jtwj, &ne.jtwr, damping).map_err(|e| attach_best(e, &estimate))?;
            let step_max = step.max_abs();
            if step_max < cfg.step_tolerance {
                converged = true;
                last = Some(ne);
                break 'outer;
            }
            let candidate = retract(&estimate, &basis, &step)?;
            let cost_after = frozen_cost(&candidate, matches, &order, &ne.weights);
            if cost_after <= ne.cost * (1.0 + COST_TOLERANCE) {
                history.push(IterationRecord {
                    iteration,
                    cost_before: ne.cost,
                    cost_after,
                    step_max,
                    damping,
                    estimate: candidate,
                });
                estimate = candidate;
                continue 'outer;
            }
            damping = if damping < scale * 1e-9 { scale * 1e-9 } else { damping * 10.0 };
        }
        // No damped step lowers the cost: stationary to working precision.
        converged = true;
        last = Some(ne);
        break;
    }

    let ne = match last {
        Some(ne) => ne,
        None => {
            let basis = finding_bases(estimate.translation())?;
            assemble_ordered(&estimate, &basis, matches, &order, c_t, &ctx.noise)
        }
    };
    Ok(OptimizationResult {
        final_rms_px: rms_pixel_distance(&estimate, matches, ctx),
        estimate,
        iterations,
        converged,
        final_rms_normalized: ne.rms_normalized,
        normal_matrix: ne.jtwj,
        robust_normal_matrix: ne.jtj_robust,
        history,
    })
}

fn attach_best(err: Error, best: &ExtrinsicEstimate) -> Error {
    match err {
        Error::DegenerateGeometry { reason, .. } => Error::DegenerateGeometry {
            reason,
            best: Some(Box::new(*best)),
        },
        other => other,
    }
}

/// RMS right-image point-to-line distance in pixels; matches whose epipolar
/// line is undefined are skipped.
pub fn rms_pixel_distance(ext: &ExtrinsicEstimate, matches: &[NormalizedMatch], ctx: &CalibrationContext) -> f64 {
    let e = essential_from(ext);
    let (sum, n) = matches
        .iter()
        .filter_map(|m| pixel_epipolar_distance(&ctx.left, &ctx.right, &e, &m.pixel).ok())
        .fold((0.0, 0usize), |(s, n), d| (s + d * d, n + 1));
    if n == 0 {
        0.0
    } else {
        (sum / n as f64).sqrt()
    }
}

/// Jacobian rows and residual variances (floored at [`WEIGHT_EPSILON`]) at
/// `ext`, in input order. Feeds the full covariance.
pub fn information_rows(
    ext: &ExtrinsicEstimate,
    matches: &[NormalizedMatch],
    noise: &NoiseModel,
) -> Result<(Vec<Vector5<f64>>, Vec<f64>)> {
    let basis = finding_bases(ext.translation())?;
    let lin = Linearization::new(ext, &basis);
    let e = crate::geometry::EssentialMatrix(lin.essential);
    Ok(matches
        .iter()
        .map(|m| (lin.row(m).1, residual_covariance(&e, m, noise) + WEIGHT_EPSILON))
        .unzip())
}

/// Translation direction `t` expressed in the tangent frame at `t_hat`; used to
/// compare estimates in error-state coordinates.
pub fn tangent_translation_error(t_hat: &Vector3<f64>, t: &Vector3<f64>) -> Result<[f64; 2]> {
    let b = finding_bases(t_hat)?;
    Ok([b.b1.dot(t), b.b2.dot(t)])
}
