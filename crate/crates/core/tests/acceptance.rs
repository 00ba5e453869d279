//! Acceptance suite. Runs every criterion in sequence (so the timing budget is
//! measured on an otherwise idle thread), prints one PASS/FAIL line per
//! criterion and fails if any criterion fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{Matrix5, Vector3, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use selfcal_core::covariance::{approx_covariance, full_covariance, DEFAULT_LAMBDA_THRESHOLD};
use selfcal_core::geometry::{epipolar_residual, essential_from};
use selfcal_core::manifold::{exp_map, finding_bases, local_coordinates, retract};
use selfcal_core::optimizer::{optimize, residual_and_jacobian, CalibrationContext, OptimizationResult};
use selfcal_core::pipeline::{estimate_covariance, CovarianceMode, PipelineConfig, Session};
use selfcal_core::simulator::{perturbed_prior, simulate, Dataset, GroundTruth, SceneConfig};
use selfcal_core::{ErrorState, ExtrinsicEstimate, NormalizedMatch, OptimizerConfig, PixelMatch};

const PRIOR_ROTATION_DEG: f64 = 3.0;
const PRIOR_TRANSLATION_DEG: f64 = 2.0;

struct Outcome {
    id: u8,
    name: &'static str,
    passed: bool,
    detail: String,
    elapsed: Duration,
}

/// Manifold and cost invariants gathered from every optimization the suite runs.
#[derive(Default)]
struct Invariants {
    runs: usize,
    steps: usize,
    max_unit_error: f64,
    max_orthonormality_error: f64,
    max_relative_cost_increase: f64,
}

impl Invariants {
    fn check(&mut self, ext: &ExtrinsicEstimate) {
        let (ortho, unit) = ext.manifold_errors();
        self.max_orthonormality_error = self.max_orthonormality_error.max(ortho);
        self.max_unit_error = self.max_unit_error.max(unit);
    }

    fn record(&mut self, result: &OptimizationResult) {
        self.runs += 1;
        self.check(&result.estimate);
        for step in &result.history {
            self.steps += 1;
            self.check(&step.estimate);
            let increase = (step.cost_after - step.cost_before) / step.cost_before.max(f64::MIN_POSITIVE);
            self.max_relative_cost_increase = self.max_relative_cost_increase.max(increase);
        }
    }

    /// Feeds the session one frame and records the optimization it ran, if any.
    fn step_session(&mut self, session: &mut Session, frame: &[PixelMatch]) {
        let before = session.state.diagnostics.len();
        session.process_frame(frame);
        self.check(&session.state.estimate);
        let ran = session.state.diagnostics.len() > before
            && session.state.diagnostics.last().is_some_and(|d| d.optimized && d.error.is_none());
        if ran {
            if let Some(result) = &session.state.last_optimization {
                self.record(result);
            }
        }
    }
}

fn truth() -> GroundTruth {
    GroundTruth::default_rig()
}

fn context(truth: &GroundTruth, sigma_px: f64) -> CalibrationContext {
    CalibrationContext::new(truth.intrinsics_left, truth.intrinsics_right, sigma_px).unwrap()
}

fn normalized(truth: &GroundTruth, matches: &[PixelMatch]) -> Vec<NormalizedMatch> {
    matches
        .iter()
        .map(|m| NormalizedMatch::from_pixels(&truth.intrinsics_left, &truth.intrinsics_right, *m).unwrap())
        .collect()
}

fn single_frame(points: usize, sigma_px: f64, seed: u64, truth: &GroundTruth) -> Dataset {
    simulate(
        &SceneConfig {
            num_points_per_frame: points,
            frames: 1,
            sigma_px,
            seed,
            ..Default::default()
        },
        truth,
    )
    .unwrap()
}

fn prior(truth: &GroundTruth) -> ExtrinsicEstimate {
    perturbed_prior(&truth.extrinsic, PRIOR_ROTATION_DEG, PRIOR_TRANSLATION_DEG).unwrap()
}

/// Rotation error about the left camera axes, degrees.
fn rotation_error_axes(truth: &ExtrinsicEstimate, est: &ExtrinsicEstimate) -> [f64; 3] {
    let basis = finding_bases(truth.translation()).unwrap();
    let d = local_coordinates(truth, &basis, est).delta_theta;
    [d.x.to_degrees(), d.y.to_degrees(), d.z.to_degrees()]
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn residual(ext: &ExtrinsicEstimate, m: &NormalizedMatch) -> f64 {
    epipolar_residual(&essential_from(ext), m)
}

fn c1_jacobian() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let w = random_unit(&mut rng) * rng.random_range(0.0..3.0);
        let t = random_unit(&mut rng);
        let ext = ExtrinsicEstimate::new(exp_map(&w), t, 1.0).unwrap();
        let basis = finding_bases(&t).unwrap();
        let f = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 1.0);
        let fp = Vector3::new(rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5), 1.0);
        let m = NormalizedMatch {
            f,
            f_prime: fp,
            pixel: PixelMatch::new(0, [0.0, 0.0], [0.0, 0.0]),
            disparity: 0.0,
        };
        let (_, j) = residual_and_jacobian(&ext, &basis, &m);
        let mut fd = Vector5::zeros();
        for k in 0..5 {
            let mut d = Vector5::zeros();
            d[k] = h;
            let plus = retract(&ext, &basis, &ErrorState::from_vector(&d)).unwrap();
            let minus = retract(&ext, &basis, &ErrorState::from_vector(&-d)).unwrap();
            fd[k] = (residual(&plus, &m) - residual(&minus, &m)) / (2.0 * h);
        }
        worst = worst.max((fd - j).amax() / j.amax());
    }
    (worst < 1e-6, format!("max relative error {worst:.2e} over 1000 configurations (limit 1e-6)"))
}

fn c2_fig1(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let data = single_frame(2000, 0.0, 202, &truth);
    let ms = normalized(&truth, &data.matches);
    let ctx = context(&truth, 0.5);
    let start = Instant::now();
    let result = optimize(&prior(&truth), &ms, &OptimizerConfig::default(), &ctx).unwrap();
    let elapsed = start.elapsed();
    inv.record(&result);
    let rot = result.estimate.rotation_error_deg(&truth.extrinsic);
    let trans = result.estimate.translation_error_deg(&truth.extrinsic);
    let passed = rot < 0.01 && trans < 0.01 && result.iterations <= 25 && elapsed < Duration::from_secs(1);
    (
        passed,
        format!(
            "rotation error {rot:.2e} deg, translation error {trans:.2e} deg, {} iterations, optimize {:.1} ms",
            result.iterations,
            elapsed.as_secs_f64() * 1e3
        ),
    )
}

fn c3_operating_point(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let ctx = context(&truth, 0.5);
    let trials = 50;
    let mut worst = 0.0f64;
    let mut y_largest = 0;
    for trial in 0..trials {
        let data = single_frame(4000, 0.5, 300 + trial, &truth);
        let ms = normalized(&truth, &data.matches);
        let result = optimize(&prior(&truth), &ms, &OptimizerConfig::default(), &ctx).unwrap();
        inv.record(&result);
        let [ex, ey, ez] = rotation_error_axes(&truth.extrinsic, &result.estimate).map(f64::abs);
        worst = worst.max(ex).max(ey).max(ez);
        if ey > ex && ey > ez {
            y_largest += 1;
        }
    }
    let fraction = y_largest as f64 / trials as f64;
    (
        worst < 0.1 && fraction >= 0.6,
        format!(
            "max per-axis rotation error {worst:.4} deg (limit 0.1); y-axis largest in {y_largest}/{trials} = {:.0}% (need >= 60%)",
            fraction * 100.0
        ),
    )
}

fn c4_consistency(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let ctx = context(&truth, 0.5);
    let basis = finding_bases(truth.extrinsic.translation()).unwrap();
    let runs = 200;
    let mut nees_sum = 0.0;
    let mut predicted = Matrix5::zeros();
    let mut empirical = Matrix5::zeros();
    for run in 0..runs {
        let data = single_frame(500, 0.5, 4000 + run, &truth);
        let ms = normalized(&truth, &data.matches);
        let result = optimize(&prior(&truth), &ms, &OptimizerConfig::default(), &ctx).unwrap();
        inv.record(&result);
        let cov = estimate_covariance(&result, &ms, CovarianceMode::Full, &ctx).unwrap();
        let err = local_coordinates(&truth.extrinsic, &basis, &result.estimate).to_vector();
        let info = cov.sigma_delta.try_inverse().unwrap();
        nees_sum += (err.transpose() * info * err)[0];
        predicted += cov.sigma_delta;
        empirical += err * err.transpose();
    }
    let nees = nees_sum / runs as f64;
    predicted /= runs as f64;
    empirical /= runs as f64;
    let ratios: Vec<f64> = (0..5).map(|i| empirical[(i, i)] / predicted[(i, i)]).collect();
    let diag_ok = ratios.iter().all(|r| (0.5..=2.0).contains(r));
    (
        (3.5..=7.0).contains(&nees) && diag_ok,
        format!(
            "mean NEES {nees:.2} (need [3.5, 7.0]); empirical/predicted diagonal {:?} (need [0.5, 2])",
            ratios.iter().map(|r| format!("{r:.2}")).collect::<Vec<_>>()
        ),
    )
}

fn c5_equivalence() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(5..200);
        let scale = 10f64.powf(rng.random_range(-3.0..1.0));
        let rows: Vec<Vector5<f64>> = (0..n)
            .map(|_| Vector5::from_fn(|_, _| rng.random_range(-scale..scale)))
            .collect();
        let c_r = 10f64.powf(rng.random_range(-9.0..0.0));
        let jtj = rows.iter().fold(Matrix5::zeros(), |acc, j| acc + j * j.transpose());
        let full = full_covariance(&rows, &vec![c_r; n]).unwrap();
        let approx = approx_covariance(&jtj, c_r).unwrap();
        worst = worst.max((full.sigma_delta - approx.sigma_delta).amax() / full.sigma_delta.amax());
    }
    (worst < 1e-9, format!("max relative difference {worst:.2e} over 100 instances (limit 1e-9)"))
}

fn run_session(truth: &GroundTruth, frames: &[Vec<PixelMatch>], seed: u64, inv: &mut Invariants) -> Session {
    let mut cfg = PipelineConfig::default();
    cfg.rejection.seed = seed;
    let mut session = Session::new(prior(truth), truth.intrinsics_left, truth.intrinsics_right, cfg).unwrap();
    for frame in frames {
        inv.step_session(&mut session, frame);
    }
    session
}

fn c6_outliers(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let trials = 20;
    let mut within_2x = 0;
    let mut clean_buffers = 0;
    let mut survivors_total = 0;
    let mut worst_ratio = 0.0f64;
    let mut sq_noisy = 0.0;
    let mut sq_clean = 0.0;
    for trial in 0..trials {
        let data = simulate(
            &SceneConfig {
                outlier_fraction: 0.2,
                seed: 600 + trial,
                ..Default::default()
            },
            &truth,
        )
        .unwrap();
        let labels = &data.truth.outlier_labels;
        let inliers: Vec<PixelMatch> = data
            .matches
            .iter()
            .zip(labels)
            .filter_map(|(m, &o)| (!o).then_some(*m))
            .collect();
        let outliers: Vec<PixelMatch> = data
            .matches
            .iter()
            .zip(labels)
            .filter_map(|(m, &o)| o.then_some(*m))
            .collect();

        let noisy = run_session(&truth, &data.frames(), trial, inv);
        let clean = run_session(&truth, &selfcal_core::simulator::group_frames(&inliers), trial, inv);
        let err_noisy = noisy.state.estimate.rotation_error_deg(&truth.extrinsic);
        let err_clean = clean.state.estimate.rotation_error_deg(&truth.extrinsic);
        sq_noisy += err_noisy * err_noisy;
        sq_clean += err_clean * err_clean;
        let ratio = err_noisy / err_clean;
        worst_ratio = worst_ratio.max(ratio);
        if err_noisy <= 2.0 * err_clean {
            within_2x += 1;
        }
        let survivors = outliers.iter().filter(|m| noisy.state.buffer.contains_pixel(m)).count();
        survivors_total += survivors;
        if survivors == 0 {
            clean_buffers += 1;
        }
    }
    let clean_fraction = clean_buffers as f64 / trials as f64;
    let rms_noisy = (sq_noisy / trials as f64).sqrt();
    let rms_clean = (sq_clean / trials as f64).sqrt();
    (
        rms_noisy <= 2.0 * rms_clean && clean_fraction >= 0.95,
        format!(
            "RMS rotation error {rms_noisy:.4} deg vs {rms_clean:.4} deg outlier-free (need <= 2x); \
             per trial within 2x in {within_2x}/{trials} (worst ratio {worst_ratio:.2}); \
             outlier-free final buffer in {clean_buffers}/{trials} trials (need >= 95%), {survivors_total} surviving outliers in total"
        ),
    )
}

fn c7_degeneracy(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let far = simulate(
        &SceneConfig {
            frames: 100,
            seed: 700,
            ..SceneConfig::far_scene()
        },
        &truth,
    )
    .unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.rejection.seed = 700;
    let mut session = Session::new(prior(&truth), truth.intrinsics_left, truth.intrinsics_right, cfg).unwrap();
    let mut min_lambda = f64::INFINITY;
    for frame in far.frames() {
        inv.step_session(&mut session, &frame);
        min_lambda = min_lambda.min(session.state.covariance.lambda_max);
    }
    let far_ok = !session.state.terminated && min_lambda >= DEFAULT_LAMBDA_THRESHOLD;

    let near = simulate(
        &SceneConfig {
            frames: 50,
            seed: 701,
            ..SceneConfig::near_scene()
        },
        &truth,
    )
    .unwrap();
    cfg.rejection.seed = 701;
    let mut session = Session::new(prior(&truth), truth.intrinsics_left, truth.intrinsics_right, cfg).unwrap();
    for frame in near.frames() {
        inv.step_session(&mut session, &frame);
    }
    let near_ok = session.state.terminated;
    let terminated_at = session.state.frames_processed;
    (
        far_ok && near_ok,
        format!(
            "far scene: smallest lambda_max {min_lambda:.2e} over 100 frames (threshold {DEFAULT_LAMBDA_THRESHOLD:e}); \
             near scene: terminated={near_ok} after {terminated_at} frames (limit 50), lambda_max {:.2e}",
            session.state.covariance.lambda_max
        ),
    )
}

fn c8_timing(inv: &mut Invariants) -> (bool, String) {
    let truth = truth();
    let ctx = context(&truth, 0.5);
    let data = single_frame(4000, 0.5, 800, &truth);
    let ms = normalized(&truth, &data.matches);
    let prior = prior(&truth);
    let mut times = Vec::with_capacity(20);
    for _ in 0..20 {
        let start = Instant::now();
        let result = optimize(&prior, &ms, &OptimizerConfig::default(), &ctx).unwrap();
        let cov = estimate_covariance(&result, &ms, CovarianceMode::Full, &ctx).unwrap();
        times.push(start.elapsed());
        std::hint::black_box(cov);
        inv.record(&result);
    }
    times.sort();
    let median = (times[9] + times[10]) / 2;
    (
        median <= Duration::from_millis(100),
        format!(
            "median optimize + covariance on 4000 matches {:.2} ms over 20 runs (limit 100 ms)",
            median.as_secs_f64() * 1e3
        ),
    )
}

fn c9_invariants(inv: &Invariants) -> (bool, String) {
    (
        inv.max_unit_error <= 1e-12 && inv.max_orthonormality_error <= 1e-9 && inv.max_relative_cost_increase <= 1e-12,
        format!(
            "{} optimizations, {} accepted steps: max | |t| - 1 | {:.1e} (limit 1e-12), max |R^T R - I| {:.1e} (limit 1e-9), \
             max relative cost increase {:.1e} (limit 1e-12)",
            inv.runs, inv.steps, inv.max_unit_error, inv.max_orthonormality_error, inv.max_relative_cost_increase
        ),
    )
}

fn run_bin(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_selfcal"))
        .args(args)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn simulate_and_calibrate(dir: &Path) -> Option<Vec<u8>> {
    let data = dir.join("data");
    let report = dir.join("report.json");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    if !run_bin(&["simulate", "--out", &s(&data), "--seed", "1234"]) {
        return None;
    }
    if !run_bin(&[
        "calibrate",
        "--intrinsics",
        &s(&data.join("intrinsics.json")),
        "--matches",
        &s(&data.join("matches.csv")),
        "--prior",
        &s(&data.join("prior.json")),
        "--seed",
        "99",
        "--out",
        &s(&report),
    ]) {
        return None;
    }
    std::fs::read(report).ok()
}

fn c10_determinism() -> (bool, String) {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    match (simulate_and_calibrate(a.path()), simulate_and_calibrate(b.path())) {
        (Some(x), Some(y)) => (
            x == y,
            format!("two simulate + calibrate runs: reports of {} and {} bytes, identical={}", x.len(), y.len(), x == y),
        ),
        _ => (false, "simulate or calibrate exited with an error".into()),
    }
}

fn timed(
    out: &mut Vec<Outcome>,
    id: u8,
    name: &'static str,
    budget: Option<Duration>,
    f: impl FnOnce() -> (bool, String),
) {
    let start = Instant::now();
    let (mut passed, mut detail) = f();
    let elapsed = start.elapsed();
    if let Some(limit) = budget {
        if elapsed > limit {
            passed = false;
            detail.push_str(&format!("; runtime {:.2} s exceeds {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()));
        }
    }
    out.push(Outcome {
        id,
        name,
        passed,
        detail,
        elapsed,
    });
}

#[test]
fn acceptance_criteria() {
    let mut inv = Invariants::default();
    let mut out = Vec::new();
    let secs = Duration::from_secs;
    timed(&mut out, 1, "jacobian correctness", Some(secs(5)), c1_jacobian);
    timed(&mut out, 2, "recovery from a 3 degree prior", Some(secs(1)), || c2_fig1(&mut inv));
    timed(&mut out, 3, "noisy recovery at the operating point", Some(secs(60)), || {
        c3_operating_point(&mut inv)
    });
    timed(&mut out, 4, "covariance consistency", Some(secs(300)), || c4_consistency(&mut inv));
    timed(&mut out, 5, "approximate covariance equivalence", Some(secs(5)), c5_equivalence);
    timed(&mut out, 6, "outlier robustness", Some(secs(120)), || c6_outliers(&mut inv));
    timed(&mut out, 7, "degeneracy detection", Some(secs(120)), || c7_degeneracy(&mut inv));
    timed(&mut out, 8, "timing budget", None, || c8_timing(&mut inv));
    timed(&mut out, 9, "manifold invariants", None, || c9_invariants(&inv));
    timed(&mut out, 10, "determinism", None, c10_determinism);

    println!();
    for o in &out {
        println!(
            "criterion {:>2} {} {}: {} [{:.2} s]",
            o.id,
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail,
            o.elapsed.as_secs_f64()
        );
    }
    let failed: Vec<u8> = out.iter().filter(|o| !o.passed).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
