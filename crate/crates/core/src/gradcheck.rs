//! Finite-difference checks for the diversity-loss gradient and for the
//! gradient assembled by the projection fit.

use serde::Serialize;

use crate::detect::Detector;
use crate::dqem::fit::directional_check;
use crate::dqem::{diversity_loss, diversity_loss_grad, FitProblem, ProjectionPair};
use crate::error::Result;
use crate::exec::Execution;
use crate::numerics::{derive_seed, SeededRng};
use crate::scene::{generate_frame, SceneConfig};

/// Cluster counts cycled through by the diversity-loss check.
pub const GRAD_CHECK_K: [usize; 3] = [2, 6, 16];
pub const DIVERSITY_FD_STEP: f64 = 1e-6;
pub const DIVERSITY_TOLERANCE: f64 = 1e-6;
pub const FIT_FD_STEP: f64 = 1e-5;
pub const FIT_TOLERANCE: f64 = 1e-4;

/// Denominator floor for relative errors. Central differences with
/// `h = 1e-6` carry about `1e-10` of absolute rounding error, which a
/// smaller floor would turn into spurious failures on near-zero components.
pub const REL_FLOOR: f64 = 1e-2;

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Central differences of the diversity loss, one coordinate at a time.
pub fn diversity_fd_grad(scores: &[f64], h: f64) -> Vec<f64> {
    (0..scores.len())
        .map(|j| {
            let mut plus = scores.to_vec();
            plus[j] += h;
            let mut minus = scores.to_vec();
            minus[j] -= h;
            (diversity_loss(&plus) - diversity_loss(&minus)) / (2.0 * h)
        })
        .collect()
}

/// Largest relative error between the analytic and finite-difference
/// gradients over `cases` random score vectors.
pub fn diversity_check(cases: usize, seed: u64) -> f64 {
    let mut rng = SeededRng::new(seed);
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let k = GRAD_CHECK_K[c % GRAD_CHECK_K.len()];
        let spread = rng.uniform_in(0.5, 3.0);
        let scores: Vec<f64> = (0..k).map(|_| spread * rng.normal()).collect();
        let analytic = diversity_loss_grad(&scores);
        let numeric = diversity_fd_grad(&scores, DIVERSITY_FD_STEP);
        for (a, n) in analytic.iter().zip(&numeric) {
            worst = worst.max(relative_error(*a, *n));
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub cases: usize,
    pub diversity_max_rel_error: f64,
    pub fit_max_rel_error: f64,
    pub passed: bool,
}

/// Both suites. The fit check uses a small two-frame problem at a random
/// point near the identity.
pub fn run(cases: usize, seed: u64, exec: Execution) -> Result<GradcheckReport> {
    let diversity = diversity_check(cases, derive_seed(seed, "gradcheck-diversity"));
    let scene = SceneConfig {
        n_objects: 4,
        background_points: 500,
        ..SceneConfig::default()
    };
    let mut rng = SeededRng::new(derive_seed(seed, "gradcheck-frames"));
    let frames = vec![generate_frame(&scene, &mut rng)?, generate_frame(&scene, &mut rng)?];
    let det = Detector::default();
    let problem = FitProblem::new(&frames, &det.params, &det.grid, &scene.bounds(), scene.noise_sigma, seed)?;
    let mut prng = SeededRng::new(derive_seed(seed, "gradcheck-point"));
    let point = ProjectionPair::perturbed_identity(scene.d, 0.05, &mut prng);
    let directions = cases.clamp(1, 10);
    let fit = directional_check(&problem, &point, directions, FIT_FD_STEP, &mut prng, exec)?;
    Ok(GradcheckReport {
        cases,
        diversity_max_rel_error: diversity,
        fit_max_rel_error: fit,
        passed: diversity < DIVERSITY_TOLERANCE && fit < FIT_TOLERANCE,
    })
}
