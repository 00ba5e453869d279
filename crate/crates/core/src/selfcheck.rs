//! Built-in numerical oracles run by `selfcal selfcheck`.

use nalgebra::{Matrix5, Vector3, Vector5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::covariance::{approx_covariance, full_covariance};
use crate::geometry::{epipolar_residual, essential_from, ExtrinsicEstimate, NormalizedMatch, PixelMatch};
use crate::manifold::{exp_map, finding_bases, retract, ErrorState};
use crate::optimizer::residual_and_jacobian;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn unit_vector(rng: &mut impl Rng) -> Vector3<f64> {
    loop {
        let v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let n = v.norm();
        if n > 0.1 && n <= 1.0 {
            return v / n;
        }
    }
}

fn random_match(rng: &mut impl Rng) -> NormalizedMatch {
    let f = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    let f_prime = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0);
    NormalizedMatch {
        f,
        f_prime,
        pixel: PixelMatch::new(0, [0.0, 0.0], [0.0, 0.0]),
        disparity: 0.0,
    }
}

/// Largest relative deviation `|J_fd - J|_inf / |J|_inf` over random
/// configurations, with central differences through the retraction.
pub fn jacobian_finite_difference(configs: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for _ in 0..configs {
        let axis = unit_vector(&mut rng);
        let angle = rng.random_range(0.0..std::f64::consts::PI * 0.9);
        let t = unit_vector(&mut rng);
        let ext = ExtrinsicEstimate::new(exp_map(&(axis * angle)), t, 1.0).expect("valid random pose");
        let basis = finding_bases(&t).expect("unit translation");
        let m = random_match(&mut rng);
        let (_, j) = residual_and_jacobian(&ext, &basis, &m);
        let mut fd = Vector5::zeros();
        for k in 0..5 {
            let mut d = Vector5::zeros();
            d[k] = h;
            let plus = retract(&ext, &basis, &ErrorState::from_vector(&d)).expect("small step");
            let minus = retract(&ext, &basis, &ErrorState::from_vector(&-d)).expect("small step");
            fd[k] = (epipolar_residual(&essential_from(&plus), &m) - epipolar_residual(&essential_from(&minus), &m))
                / (2.0 * h);
        }
        let scale = j.amax();
        if scale > 0.0 {
            worst = worst.max((fd - j).amax() / scale);
        }
    }
    worst
}

/// Dominant eigenvalue by power iteration.
pub fn power_method(m: &Matrix5<f64>, iterations: usize) -> f64 {
    let mut v = Vector5::repeat(1.0).normalize();
    let mut lambda = 0.0;
    for _ in 0..iterations {
        let w = m * v;
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        lambda = v.dot(&w);
        v = w / n;
    }
    lambda
}

/// Largest relative gap between the covariance eigen-solver and power
/// iteration on random well-conditioned information matrices.
pub fn eigen_solver_agreement(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let rows: Vec<Vector5<f64>> = (0..20)
            .map(|_| Vector5::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let covs = vec![1.0; rows.len()];
        let Ok(cov) = full_covariance(&rows, &covs) else {
            continue;
        };
        let reference = power_method(&cov.sigma_delta, 2000);
        worst = worst.max((cov.lambda_max - reference).abs() / reference);
    }
    worst
}

/// Largest relative gap between the shared-variance and full covariance when
/// every residual has the same variance.
pub fn approximation_agreement(instances: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let c_r = 10f64.powf(rng.random_range(-8.0..0.0));
        let rows: Vec<Vector5<f64>> = (0..30)
            .map(|_| Vector5::from_fn(|_, _| rng.random_range(-1.0..1.0)))
            .collect();
        let jtj = rows.iter().fold(Matrix5::zeros(), |acc, j| acc + j * j.transpose());
        let (Ok(full), Ok(approx)) = (full_covariance(&rows, &vec![c_r; rows.len()]), approx_covariance(&jtj, c_r))
        else {
            continue;
        };
        worst = worst.max((full.sigma_delta - approx.sigma_delta).amax() / full.sigma_delta.amax());
    }
    worst
}

/// Largest `|R^T R - I|` after the exponential map of random rotation vectors.
pub fn exp_map_orthonormality(samples: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples)
        .map(|_| {
            let w = unit_vector(&mut rng) * rng.random_range(0.0..3.0);
            let r = exp_map(&w);
            (r.transpose() * r - nalgebra::Matrix3::identity()).amax()
        })
        .fold(0.0, f64::max)
}

pub fn run_all(seed: u64) -> Vec<CheckResult> {
    let jac = jacobian_finite_difference(1000, seed);
    let eig = eigen_solver_agreement(100, seed.wrapping_add(1));
    let approx = approximation_agreement(100, seed.wrapping_add(2));
    let ortho = exp_map_orthonormality(1000, seed.wrapping_add(3));
    vec![
        CheckResult {
            name: "jacobian_finite_difference",
            passed: jac < 1e-6,
            detail: format!("max relative error {jac:.3e} (limit 1e-6)"),
        },
        CheckResult {
            name: "eigen_solver_vs_power_method",
            passed: eig < 1e-9,
            detail: format!("max relative gap {eig:.3e} (limit 1e-9)"),
        },
        CheckResult {
            name: "approximate_vs_full_covariance",
            passed: approx < 1e-9,
            detail: format!("max relative gap {approx:.3e} (limit 1e-9)"),
        },
        CheckResult {
            name: "exp_map_orthonormality",
            passed: ortho < 1e-9,
            detail: format!("max |R^T R - I| {ortho:.3e} (limit 1e-9)"),
        },
    ]
}
