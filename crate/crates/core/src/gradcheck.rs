//! Analytic-vs-finite-difference verification of the guidance gradient.
//!
//! Cases are drawn from the synthetic motion manifold: a generated sample,
//! feature noise, and ground-truth controls perturbed off the motion so both
//! losses are active. One case matrix covers every control sparsity level.

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::ControlSpec;
use crate::dataset::{gen_sample, sample_control};
use crate::error::Result;
use crate::guidance::{fd_gradient, loss_gradient};
use crate::motion::MotionFeatures;
use crate::skeleton::JOINT_COUNT;

/// Gradient values below this are treated as zero when forming relative
/// errors.
pub const GRAD_FLOOR: f64 = 1e-8;

/// Absolute-difference floor: central differences carry ~1e-10 of evaluation
/// noise (eps * loss / 2h plus accumulated rounding), so differences this
/// small say nothing about the analytic gradient. Entries must disagree by
/// more than this in absolute terms before the relative test applies.
pub const ABS_FLOOR: f64 = 1e-8;

/// Default acceptance tolerance on the elementwise relative error.
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

/// Step for the finite-difference oracle. Wider than the classic 1e-5:
/// central-difference cancellation noise scales as eps * f / (2h), and at
/// 1e-5 it already reaches ~2e-10, which fails a 1e-4 relative comparison on
/// legitimate near-floor gradient entries (~1e-7). 1e-4 keeps truncation
/// negligible at this loss's curvature while cutting cancellation 10x.
pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GradcheckCase {
    pub sparsity: usize,
    pub case: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub cases_per_level: usize,
    pub tolerance: f64,
    pub results: Vec<GradcheckCase>,
    pub max_rel_err: f64,
    pub pass: bool,
}

/// Sequence length used for a sparsity level: long enough to hold the
/// controlled frames, short otherwise to keep the finite differences cheap.
fn frames_for(sparsity: usize) -> usize {
    match sparsity {
        0..=5 => 32,
        6..=49 => 64,
        _ => 196,
    }
}

/// Build one random (motion, control) pair with active constraints.
pub fn random_case(sparsity: usize, seed: u64, case: usize) -> Result<(MotionFeatures, ControlSpec)> {
    let n_frames = frames_for(sparsity);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    rng.set_stream((sparsity as u64) << 32 | case as u64);
    let sample = gen_sample(rng.gen_range(0..1000), n_frames, rng.gen())?;
    let mut control = sample_control(&sample, sparsity, &mut rng)?;

    // Perturb constraints off the motion so losses and gradients are live.
    for n in 0..control.n_frames() {
        if control.traj_mask()[n] {
            let mut p = control.traj_point(n);
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.4..0.4);
            }
            control.set_traj_point(n, p);
        }
        if control.pose_mask()[n] {
            let mut pose = control.pose_frame(n);
            for j in 0..JOINT_COUNT {
                let mut q = pose.joint(j);
                for v in q.iter_mut() {
                    *v += rng.gen_range(-0.15..0.15);
                }
                pose.set_joint(j, q);
            }
            control.set_pose_frame(n, &pose);
        }
    }

    // Roughen the motion itself so it is not a special point of the losses.
    let mut data = sample.features.into_data();
    for v in data.iter_mut() {
        *v += rng.gen_range(-0.05..0.05);
    }
    Ok((MotionFeatures::new(data)?, control))
}

/// Elementwise max relative error between two gradients, ignoring entries
/// where both are below the floor.
pub fn max_rel_err(analytic: &Array2<f64>, fd: &Array2<f64>) -> f64 {
    analytic
        .iter()
        .zip(fd.iter())
        .filter(|(a, f)| (a.abs() > GRAD_FLOOR || f.abs() > GRAD_FLOOR) && (*a - *f).abs() > ABS_FLOOR)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()))
        .fold(0.0, f64::max)
}

/// Run the case matrix with an arbitrary gradient implementation (tests
/// inject broken ones as a negative control).
pub fn run_with<G>(
    seed: u64,
    cases_per_level: usize,
    levels: &[usize],
    tolerance: f64,
    grad_fn: G,
) -> Result<GradcheckReport>
where
    G: Fn(&MotionFeatures, &ControlSpec) -> Result<Array2<f64>> + Sync,
{
    let jobs: Vec<(usize, usize)> = levels
        .iter()
        .flat_map(|&s| (0..cases_per_level).map(move |c| (s, c)))
        .collect();
    let results: Vec<GradcheckCase> = jobs
        .par_iter()
        .map(|&(sparsity, case)| {
            let (x, control) = random_case(sparsity, seed, case)?;
            let analytic = grad_fn(&x, &control)?;
            let fd = fd_gradient(&x, &control, FD_STEP)?;
            Ok(GradcheckCase {
                sparsity,
                case,
                max_rel_err: max_rel_err(&analytic, &fd),
            })
        })
        .collect::<Result<_>>()?;
    let max = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed,
        cases_per_level,
        tolerance,
        max_rel_err: max,
        pass: max < tolerance,
        results,
    })
}

/// The standard check: the analytic guidance gradient over all five sparsity
/// levels.
pub fn run(seed: u64, cases_per_level: usize) -> Result<GradcheckReport> {
    run_with(
        seed,
        cases_per_level,
        &[1, 2, 5, 49, 196],
        DEFAULT_TOLERANCE,
        loss_gradient,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_matrix_passes() {
        let report = run_with(7, 2, &[1, 5, 49], DEFAULT_TOLERANCE, loss_gradient).unwrap();
        assert!(report.pass, "max rel err {}", report.max_rel_err);
        assert_eq!(report.results.len(), 6);
    }

    #[test]
    fn injected_bug_is_caught() {
        let broken = |x: &MotionFeatures, c: &ControlSpec| {
            let mut g = loss_gradient(x, c)?;
            // Scale one live channel: a classic off-by-factor bug.
            for v in g.column_mut(0).iter_mut() {
                *v *= 1.5;
            }
            Ok(g)
        };
        let report = run_with(7, 2, &[5], DEFAULT_TOLERANCE, broken).unwrap();
        assert!(!report.pass);
        assert!(report.max_rel_err > 0.1);
    }

    #[test]
    fn report_serializes() {
        let report = run_with(3, 1, &[1], DEFAULT_TOLERANCE, loss_gradient).unwrap();
        let text = serde_json::to_string(&report).unwrap();
        let back: GradcheckReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back.results.len(), 1);
        assert!(back.pass);
    }
}
