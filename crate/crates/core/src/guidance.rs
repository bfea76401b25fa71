//! Analytic guidance: trajectory and pose losses, the pose alignment rule,
//! and the gradient perturbation that optimizes a noised motion toward the
//! constraints.
//!
//! The combined objective is `alpha * L_traj + (1 - alpha) * L_pose` with
//! `alpha = L_traj / (L_traj + L_pose)` recomputed at each iterate and
//! treated as a constant when differentiating. The gradient flows through
//! the full local-to-global transform (cumulative yaw, rotated velocities)
//! and through the alignment rule's dependence on the generated root — both
//! are required for the finite-difference oracle to agree.

use ndarray::Array2;

use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::kinematics::{to_global, to_global_vjp};
use crate::motion::{FramePose, GlobalMotion, MotionFeatures};
use crate::norm::FeatureStats;
use crate::skeleton::{JOINT_COUNT, PELVIS};

/// Norms below this are treated as exactly at the constraint; the
/// (sub)gradient there is zero.
const NORM_EPS: f64 = 1e-12;

/// Guidance strength and scheduling.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    /// Step size of the perturbation. Zero disables the update (kept legal so
    /// a guided run can be compared against an unguided one exactly).
    pub tau: f64,
    /// Gradient steps applied before each denoising step.
    pub steps_per_denoise: usize,
    /// Highest diffusion step at which guidance applies (`None` = from the
    /// very first sampling step).
    pub apply_from_t: Option<usize>,
    /// Lowest diffusion step at which guidance applies.
    pub apply_until_t: usize,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            tau: 0.01,
            steps_per_denoise: 1,
            apply_from_t: None,
            apply_until_t: 1,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self, t_steps: usize) -> Result<()> {
        if !(self.tau >= 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("guidance tau must be >= 0, got {}", self.tau)));
        }
        if self.steps_per_denoise == 0 {
            return Err(Error::Config("steps_per_denoise must be >= 1".into()));
        }
        let from = self.apply_from_t.unwrap_or(t_steps);
        if self.apply_until_t < 1 || from > t_steps || self.apply_until_t > from {
            return Err(Error::Config(format!(
                "guidance window [{}, {from}] must lie within [1, {t_steps}]",
                self.apply_until_t
            )));
        }
        Ok(())
    }

    pub fn active_at(&self, t: usize, t_steps: usize) -> bool {
        let from = self.apply_from_t.unwrap_or(t_steps);
        t >= self.apply_until_t && t <= from
    }
}

/// Masked mean of per-frame root position errors (Euclidean, meters).
pub fn traj_loss(g: &GlobalMotion, c: &ControlSpec) -> Result<f64> {
    if !c.has_traj() {
        return Err(Error::EmptyControl("trajectory mask has no bits set".into()));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    for n in 0..g.n_frames().min(c.n_frames()) {
        if c.traj_mask()[n] {
            let target = c.traj_point(n);
            let root = g.joint(n, PELVIS);
            let d = dist3(target, root);
            sum += d;
            count += 1.0;
        }
    }
    Ok(sum / count)
}

/// Translate the frame-`n` constraint pose so it can be compared against the
/// generated frame:
///
/// - if a trajectory constraint exists at `n`, the pose root is moved onto
///   the trajectory point;
/// - otherwise the pose is shifted horizontally so its root's ground
///   projection matches the generated root's, leaving heights untouched.
///
/// Inter-joint vectors are preserved exactly (pure translation).
pub fn align_pose(n: usize, g: &GlobalMotion, c: &ControlSpec) -> Result<FramePose> {
    if n >= c.n_frames() || !c.pose_mask()[n] {
        return Err(Error::NoConstraint { frame: n, what: "pose" });
    }
    let pose_root = c.pose_joint(n, PELVIS);
    let mut aligned = c.pose_frame(n);
    // Each joint is rebuilt as anchor + root-relative offset; the root's
    // offset is exactly zero, so the aligned root hits its anchor bit for
    // bit.
    if c.traj_mask()[n] {
        let target = c.traj_point(n);
        for j in 0..JOINT_COUNT {
            let p = c.pose_joint(n, j);
            aligned.set_joint(
                j,
                [
                    target[0] + (p[0] - pose_root[0]),
                    target[1] + (p[1] - pose_root[1]),
                    target[2] + (p[2] - pose_root[2]),
                ],
            );
        }
    } else {
        let gen_root = g.joint(n, PELVIS);
        for j in 0..JOINT_COUNT {
            let p = c.pose_joint(n, j);
            aligned.set_joint(
                j,
                [
                    gen_root[0] + (p[0] - pose_root[0]),
                    p[1],
                    gen_root[2] + (p[2] - pose_root[2]),
                ],
            );
        }
    }
    Ok(aligned)
}

/// Masked mean over controlled frames of the Frobenius-norm distance between
/// the aligned constraint pose and the generated frame.
pub fn pose_loss(g: &GlobalMotion, c: &ControlSpec) -> Result<f64> {
    if !c.has_pose() {
        return Err(Error::EmptyControl("pose mask has no bits set".into()));
    }
    let mut sum = 0.0;
    let mut count = 0.0;
    for n in 0..g.n_frames().min(c.n_frames()) {
        if c.pose_mask()[n] {
            let aligned = align_pose(n, g, c)?;
            let mut sq = 0.0;
            for j in 0..JOINT_COUNT {
                let a = aligned.joint(j);
                let b = g.joint(n, j);
                for k in 0..3 {
                    let d = a[k] - b[k];
                    sq += d * d;
                }
            }
            sum += sq.sqrt();
            count += 1.0;
        }
    }
    Ok(sum / count)
}

/// Dynamic weighting between the two losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaWeight {
    pub value: f64,
    /// Set when both losses are zero: the 0/0 case is defined as 0.5 and the
    /// combined gradient vanishes.
    pub zero_gradient: bool,
}

/// `alpha = l_traj / (l_traj + l_pose)`; the degenerate 0/0 case returns 0.5
/// with the zero-gradient flag set.
pub fn combined_alpha(l_traj: f64, l_pose: f64) -> AlphaWeight {
    debug_assert!(l_traj >= 0.0 && l_pose >= 0.0);
    let total = l_traj + l_pose;
    if total <= 0.0 {
        AlphaWeight {
            value: 0.5,
            zero_gradient: true,
        }
    } else {
        AlphaWeight {
            value: l_traj / total,
            zero_gradient: false,
        }
    }
}

/// Loss values at one iterate. When a modality has no constrained frames its
/// loss is absent and all weight goes to the other one (both absent is an
/// error at construction).
#[derive(Debug, Clone, Copy)]
pub struct GuidanceLosses {
    pub traj: Option<f64>,
    pub pose: Option<f64>,
    pub alpha: f64,
    pub zero_gradient: bool,
}

impl GuidanceLosses {
    /// The combined objective at this iterate (with this iterate's alpha).
    pub fn combined(&self) -> f64 {
        self.alpha * self.traj.unwrap_or(0.0) + (1.0 - self.alpha) * self.pose.unwrap_or(0.0)
    }
}

/// Evaluate both losses and the dynamic weight for a motion.
pub fn evaluate_losses(g: &GlobalMotion, c: &ControlSpec) -> Result<GuidanceLosses> {
    match (c.has_traj(), c.has_pose()) {
        (false, false) => Err(Error::EmptyControl(
            "control spec has neither trajectory nor pose constraints".into(),
        )),
        (true, false) => {
            let lt = traj_loss(g, c)?;
            Ok(GuidanceLosses {
                traj: Some(lt),
                pose: None,
                alpha: 1.0,
                zero_gradient: lt <= 0.0,
            })
        }
        (false, true) => {
            let lp = pose_loss(g, c)?;
            Ok(GuidanceLosses {
                traj: None,
                pose: Some(lp),
                alpha: 0.0,
                zero_gradient: lp <= 0.0,
            })
        }
        (true, true) => {
            let lt = traj_loss(g, c)?;
            let lp = pose_loss(g, c)?;
            let a = combined_alpha(lt, lp);
            Ok(GuidanceLosses {
                traj: Some(lt),
                pose: Some(lp),
                alpha: a.value,
                zero_gradient: a.zero_gradient,
            })
        }
    }
}

/// Gradient of the combined loss with respect to every global joint
/// coordinate, with alpha frozen at the current iterate.
fn combined_global_gradient(
    g: &GlobalMotion,
    c: &ControlSpec,
    losses: &GuidanceLosses,
) -> ndarray::Array3<f64> {
    let n_frames = g.n_frames();
    let mut dg = ndarray::Array3::zeros((n_frames, JOINT_COUNT, 3));
    if losses.zero_gradient {
        return dg;
    }
    let alpha = losses.alpha;

    // Trajectory term: masked mean of ||c_n - root_n||.
    if losses.traj.is_some() && alpha > 0.0 {
        let m = c.traj_count() as f64;
        for n in 0..n_frames.min(c.n_frames()) {
            if c.traj_mask()[n] {
                let target = c.traj_point(n);
                let root = g.joint(n, PELVIS);
                let d = dist3(target, root);
                if d > NORM_EPS {
                    let w = alpha / (m * d);
                    for k in 0..3 {
                        dg[[n, PELVIS, k]] += w * (root[k] - target[k]);
                    }
                }
            }
        }
    }

    // Pose term: masked mean of per-frame Frobenius norms. When the frame's
    // alignment tracks the generated root (no trajectory constraint there),
    // the shift contributes to the root gradient as well.
    if losses.pose.is_some() && alpha < 1.0 {
        let m = c.pose_count() as f64;
        let w_pose = 1.0 - alpha;
        for n in 0..n_frames.min(c.n_frames()) {
            if c.pose_mask()[n] {
                let aligned = align_pose(n, g, c).expect("mask checked");
                let mut sq = 0.0;
                let mut diffs = [[0.0f64; 3]; JOINT_COUNT];
                for j in 0..JOINT_COUNT {
                    let a = aligned.joint(j);
                    let b = g.joint(n, j);
                    for k in 0..3 {
                        diffs[j][k] = a[k] - b[k];
                        sq += diffs[j][k] * diffs[j][k];
                    }
                }
                let f = sq.sqrt();
                if f <= NORM_EPS {
                    continue;
                }
                let w = w_pose / (m * f);
                for j in 0..JOINT_COUNT {
                    for k in 0..3 {
                        dg[[n, j, k]] -= w * diffs[j][k];
                    }
                }
                if !c.traj_mask()[n] {
                    // aligned = c_pose + (gen_root.x - pose_root.x, 0, ...):
                    // every joint's aligned x/z moves with the generated root.
                    let sum_x: f64 = diffs.iter().map(|d| d[0]).sum();
                    let sum_z: f64 = diffs.iter().map(|d| d[2]).sum();
                    dg[[n, PELVIS, 0]] += w * sum_x;
                    dg[[n, PELVIS, 2]] += w * sum_z;
                }
            }
        }
    }

    dg
}

/// Analytic gradient of the combined guidance loss with respect to every
/// feature entry (alpha treated as a constant of the current iterate).
pub fn loss_gradient(x: &MotionFeatures, c: &ControlSpec) -> Result<Array2<f64>> {
    let g = to_global(x);
    let losses = evaluate_losses(&g, c)?;
    let dg = combined_global_gradient(&g, c, &losses);
    Ok(to_global_vjp(x, &dg))
}

/// [`loss_gradient`] for a motion expressed in normalized model space: the
/// features are de-normalized before the kinematic transform and the gradient
/// is pulled back through the affine map.
pub fn loss_gradient_scaled(
    x_scaled: &Array2<f64>,
    stats: &FeatureStats,
    c: &ControlSpec,
) -> Result<Array2<f64>> {
    let raw = MotionFeatures::new(stats.denormalize(x_scaled))?;
    let grad_raw = loss_gradient(&raw, c)?;
    Ok(stats.grad_to_normalized(&grad_raw))
}

/// Central-difference gradient of the combined loss, with alpha frozen at the
/// base point so it differentiates the same objective as [`loss_gradient`].
/// Serves as the independent oracle for the analytic gradient.
pub fn fd_gradient(x: &MotionFeatures, c: &ControlSpec, h: f64) -> Result<Array2<f64>> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::Config(format!("fd step h = {h} outside [1e-7, 1e-3]")));
    }
    let base = evaluate_losses(&to_global(x), c)?;
    let alpha = base.alpha;
    let has_traj = base.traj.is_some();
    let has_pose = base.pose.is_some();

    let eval = |feat: &MotionFeatures| -> Result<f64> {
        let g = to_global(feat);
        let lt = if has_traj { traj_loss(&g, c)? } else { 0.0 };
        let lp = if has_pose { pose_loss(&g, c)? } else { 0.0 };
        Ok(alpha * lt + (1.0 - alpha) * lp)
    };

    let (n, d) = x.data().dim();
    let mut grad = Array2::zeros((n, d));
    let mut probe = x.clone();
    for i in 0..n {
        for j in 0..d {
            let orig = probe.data()[[i, j]];
            probe.data_mut()[[i, j]] = orig + h;
            let fp = eval(&probe)?;
            probe.data_mut()[[i, j]] = orig - h;
            let fm = eval(&probe)?;
            probe.data_mut()[[i, j]] = orig;
            grad[[i, j]] = (fp - fm) / (2.0 * h);
        }
    }
    Ok(grad)
}

/// Apply `steps_per_denoise` gradient-descent perturbations to the motion.
pub fn perturb(x_t: &MotionFeatures, c: &ControlSpec, cfg: &GuidanceConfig) -> Result<MotionFeatures> {
    let mut x = x_t.clone();
    for _ in 0..cfg.steps_per_denoise {
        let grad = loss_gradient(&x, c)?;
        let updated = x.data() - &(cfg.tau * &grad);
        x = MotionFeatures::new(updated)?;
    }
    Ok(x)
}

/// Perturbation in normalized model space, chained through the feature stats.
pub fn perturb_scaled(
    x_scaled: &Array2<f64>,
    stats: &FeatureStats,
    c: &ControlSpec,
    cfg: &GuidanceConfig,
) -> Result<Array2<f64>> {
    let mut x = x_scaled.clone();
    for _ in 0..cfg.steps_per_denoise {
        let grad = loss_gradient_scaled(&x, stats, c)?;
        x = &x - &(cfg.tau * &grad);
    }
    Ok(x)
}

#[inline]
fn dist3(a: [f64; 3], b: [f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::tests_support::random_features;
    use crate::motion::FramePose;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn motion_and_spec(
        rng: &mut ChaCha8Rng,
        n: usize,
        traj_frames: &[usize],
        pose_frames: &[usize],
    ) -> (MotionFeatures, ControlSpec) {
        let x = random_features(rng, n);
        let g = to_global(&x);
        let mut c = ControlSpec::from_motion_frames(&g, traj_frames, pose_frames);
        // Perturb the constraints away from the generated motion so losses
        // are nonzero.
        for &f in traj_frames {
            let mut p = c.traj_point(f);
            for v in p.iter_mut() {
                *v += rng.gen_range(-0.5..0.5);
            }
            c.set_traj_point(f, p);
        }
        for &f in pose_frames {
            let mut pose = c.pose_frame(f);
            for j in 0..JOINT_COUNT {
                let mut q = pose.joint(j);
                for v in q.iter_mut() {
                    *v += rng.gen_range(-0.2..0.2);
                }
                pose.set_joint(j, q);
            }
            c.set_pose_frame(f, &pose);
        }
        (x, c)
    }

    #[test]
    fn traj_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_features(&mut rng, 8);
        let g = to_global(&x);

        // Root exactly on every controlled point -> 0.
        let c = ControlSpec::from_motion_frames(&g, &[0, 3, 7], &[]);
        assert_eq!(traj_loss(&g, &c).unwrap(), 0.0);

        // One controlled frame, root offset (0.3, 0, 0) -> 0.3.
        let mut c = ControlSpec::from_motion_frames(&g, &[2], &[]);
        let mut p = c.traj_point(2);
        p[0] += 0.3;
        c.set_traj_point(2, p);
        assert!((traj_loss(&g, &c).unwrap() - 0.3).abs() < 1e-12);

        // Two controlled frames with errors 0.3 and 0.5 -> 0.4.
        let mut c = ControlSpec::from_motion_frames(&g, &[1, 4], &[]);
        let mut p1 = c.traj_point(1);
        p1[2] += 0.3;
        c.set_traj_point(1, p1);
        let mut p4 = c.traj_point(4);
        p4[1] -= 0.5;
        c.set_traj_point(4, p4);
        assert!((traj_loss(&g, &c).unwrap() - 0.4).abs() < 1e-12);

        // Empty mask errors.
        let empty = ControlSpec::empty(8);
        assert!(matches!(traj_loss(&g, &empty), Err(Error::EmptyControl(_))));
    }

    #[test]
    fn align_pose_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_features(&mut rng, 6);
        let g = to_global(&x);

        // Constraint pose root already at the trajectory point -> identity.
        let c = ControlSpec::from_motion_frames(&g, &[2], &[2]);
        let aligned = align_pose(2, &g, &c).unwrap();
        for j in 0..JOINT_COUNT {
            let a = aligned.joint(j);
            let b = c.pose_joint(2, j);
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-12);
            }
        }

        // Trajectory constraint present: aligned root lands on the
        // trajectory point and all joints shift rigidly.
        let mut c = ControlSpec::empty(6);
        let mut pose = FramePose::zeros();
        pose.set_joint(PELVIS, [0.0, 1.0, 0.0]);
        pose.set_joint(5, [0.2, 1.4, -0.1]);
        c.set_pose_frame(3, &pose);
        c.set_traj_point(3, [2.0, 1.0, 5.0]);
        let aligned = align_pose(3, &g, &c).unwrap();
        assert_eq!(aligned.joint(PELVIS), [2.0, 1.0, 5.0]);
        assert_eq!(aligned.joint(5), [2.2, 1.4, 4.9]);

        // No trajectory constraint: horizontal projections match the
        // generated root, height untouched.
        let mut c = ControlSpec::empty(6);
        let mut pose = FramePose::zeros();
        pose.set_joint(PELVIS, [0.0, 1.1, 0.0]);
        c.set_pose_frame(4, &pose);
        let aligned = align_pose(4, &g, &c).unwrap();
        let gen_root = g.joint(4, PELVIS);
        let a = aligned.joint(PELVIS);
        assert!((a[0] - gen_root[0]).abs() < 1e-12);
        assert!((a[1] - 1.1).abs() < 1e-12);
        assert!((a[2] - gen_root[2]).abs() < 1e-12);

        // Unconstrained frame errors.
        assert!(matches!(
            align_pose(0, &g, &c),
            Err(Error::NoConstraint { .. })
        ));
    }

    #[test]
    fn align_preserves_inter_joint_vectors() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let (x, c) = motion_and_spec(&mut rng, 10, &[2, 5], &[2, 7]);
            let g = to_global(&x);
            for n in [2usize, 7] {
                let aligned = align_pose(n, &g, &c).unwrap();
                for a in 0..JOINT_COUNT {
                    for b in 0..JOINT_COUNT {
                        for k in 0..3 {
                            let before = c.pose_joint(n, a)[k] - c.pose_joint(n, b)[k];
                            let after = aligned.joint(a)[k] - aligned.joint(b)[k];
                            assert!((before - after).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn pose_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_features(&mut rng, 8);
        let g = to_global(&x);

        // Generated frame identical to constraint (post-alignment) -> 0.
        let c = ControlSpec::from_motion_frames(&g, &[], &[1, 6]);
        assert!(pose_loss(&g, &c).unwrap() < 1e-12);

        // Horizontal translation of the constraint is absorbed when no
        // trajectory constraint exists at that frame.
        let mut c = ControlSpec::from_motion_frames(&g, &[], &[3]);
        let mut pose = c.pose_frame(3);
        for j in 0..JOINT_COUNT {
            let mut p = pose.joint(j);
            p[0] += 11.0;
            p[2] -= 4.0;
            pose.set_joint(j, p);
        }
        c.set_pose_frame(3, &pose);
        assert!(pose_loss(&g, &c).unwrap() < 1e-12);

        // One controlled frame, one joint off by 0.2 post-alignment -> 0.2.
        // Use a trajectory-pinned frame so the alignment is a fixed shift.
        let mut c = ControlSpec::from_motion_frames(&g, &[5], &[5]);
        let mut pose = c.pose_frame(5);
        let mut p = pose.joint(9);
        p[1] += 0.2;
        pose.set_joint(9, p);
        c.set_pose_frame(5, &pose);
        assert!((pose_loss(&g, &c).unwrap() - 0.2).abs() < 1e-12);

        let empty = ControlSpec::empty(8);
        assert!(matches!(pose_loss(&g, &empty), Err(Error::EmptyControl(_))));
    }

    #[test]
    fn alpha_examples_and_symmetry() {
        assert_eq!(combined_alpha(2.0, 2.0).value, 0.5);
        assert_eq!(combined_alpha(1.5, 0.0).value, 1.0);
        assert_eq!(combined_alpha(1.0, 3.0).value, 0.25);
        let degenerate = combined_alpha(0.0, 0.0);
        assert_eq!(degenerate.value, 0.5);
        assert!(degenerate.zero_gradient);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let a = rng.gen_range(0.0..10.0);
            let b = rng.gen_range(0.0..10.0);
            if a + b > 0.0 {
                let s = combined_alpha(a, b).value + combined_alpha(b, a).value;
                assert!((s - 1.0).abs() < 1e-12);
                assert!((0.0..=1.0).contains(&combined_alpha(a, b).value));
            }
        }
    }

    #[test]
    fn zero_loss_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_features(&mut rng, 6);
        let g = to_global(&x);
        let c = ControlSpec::from_motion_frames(&g, &[1, 4], &[2, 5]);
        let grad = loss_gradient(&x, &c).unwrap();
        assert!(grad.iter().all(|v| v.abs() < 1e-9), "gradient should vanish at the constraint");
    }

    #[test]
    fn gradient_sparsity_pattern_single_traj_constraint() {
        use crate::motion::channel;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (x, _) = motion_and_spec(&mut rng, 12, &[], &[]);
        let g = to_global(&x);
        let mut c = ControlSpec::from_motion_frames(&g, &[6], &[]);
        let mut p = c.traj_point(6);
        p[0] += 0.4;
        p[1] += 0.1;
        p[2] -= 0.2;
        c.set_traj_point(6, p);
        let grad = loss_gradient(&x, &c).unwrap();
        for i in 0..12 {
            for ch in 0..crate::motion::FEATURE_DIM {
                let v = grad[[i, ch]];
                let feeds_constraint = match ch {
                    channel::YAW_RATE | channel::VEL_X | channel::VEL_Z => i < 6,
                    channel::HEIGHT => i == 6,
                    _ => false, // local joint channels never move the root
                };
                if !feeds_constraint {
                    assert!(
                        v.abs() < 1e-15,
                        "frame {i} channel {ch} should be zero, got {v}"
                    );
                }
            }
        }
        // And the constrained-side channels are actually live.
        assert!(grad[[3, channel::VEL_Z]].abs() > 0.0);
        assert!(grad[[6, channel::HEIGHT]].abs() > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for case in 0..10 {
            let (x, c) = motion_and_spec(&mut rng, 14, &[1, 6, 9], &[3, 6, 12]);
            let analytic = loss_gradient(&x, &c).unwrap();
            let fd = fd_gradient(&x, &c, 1e-5).unwrap();
            for i in 0..14 {
                for j in 0..crate::motion::FEATURE_DIM {
                    let a = analytic[[i, j]];
                    let f = fd[[i, j]];
                    if a.abs() > 1e-8 || f.abs() > 1e-8 {
                        let rel = (a - f).abs() / a.abs().max(f.abs());
                        assert!(
                            rel < 1e-4,
                            "case {case} frame {i} ch {j}: analytic {a} vs fd {f} (rel {rel})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn fd_gradient_exact_on_quadratic() {
        // Central differences are exact (to truncation) on quadratics; check
        // the helper's arithmetic on a synthetic quadratic in feature space.
        let h = 1e-5;
        let q = |v: &Array2<f64>| -> f64 { v.iter().map(|x| 3.0 * x * x + 2.0 * x).sum() };
        let mut v = Array2::zeros((2, crate::motion::FEATURE_DIM));
        v[[0, 0]] = 0.7;
        v[[1, 3]] = -0.4;
        // d/dx (3x^2 + 2x) = 6x + 2.
        for i in 0..2 {
            for j in 0..crate::motion::FEATURE_DIM {
                let mut vp = v.clone();
                vp[[i, j]] += h;
                let mut vm = v.clone();
                vm[[i, j]] -= h;
                let fd = (q(&vp) - q(&vm)) / (2.0 * h);
                let exact = 6.0 * v[[i, j]] + 2.0;
                assert!((fd - exact).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn fd_gradient_zero_at_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_features(&mut rng, 6);
        let g = to_global(&x);
        let c = ControlSpec::from_motion_frames(&g, &[2], &[4]);
        let fd = fd_gradient(&x, &c, 1e-5).unwrap();
        assert!(fd.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn fd_gradient_rejects_bad_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (x, c) = motion_and_spec(&mut rng, 6, &[1], &[2]);
        assert!(fd_gradient(&x, &c, 1e-8).is_err());
        assert!(fd_gradient(&x, &c, 0.01).is_err());
    }

    #[test]
    fn perturb_tau_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, c) = motion_and_spec(&mut rng, 8, &[2, 5], &[3]);
        let cfg = GuidanceConfig {
            tau: 0.0,
            ..GuidanceConfig::default()
        };
        let out = perturb(&x, &c, &cfg).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn perturb_at_satisfied_constraints_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random_features(&mut rng, 8);
        let g = to_global(&x);
        let c = ControlSpec::from_motion_frames(&g, &[2, 5], &[3]);
        let out = perturb(&x, &c, &GuidanceConfig::default()).unwrap();
        let max = out
            .data()
            .iter()
            .zip(x.data().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max < 1e-9);
    }

    #[test]
    fn perturb_descends_combined_loss() {
        // tau = 0.01, one step: the combined loss strictly decreases in at
        // least 99 of 100 random trials.
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = GuidanceConfig {
            tau: 0.01,
            ..GuidanceConfig::default()
        };
        let mut decreased = 0;
        for _ in 0..100 {
            let (x, c) = motion_and_spec(&mut rng, 12, &[2, 7, 10], &[4, 9]);
            let before = evaluate_losses(&to_global(&x), &c).unwrap().combined();
            let x2 = perturb(&x, &c, &cfg).unwrap();
            let after = evaluate_losses(&to_global(&x2), &c).unwrap().combined();
            if after < before {
                decreased += 1;
            }
        }
        assert!(decreased >= 99, "combined loss decreased in only {decreased}/100 trials");
    }

    #[test]
    fn guidance_config_validation() {
        let ok = GuidanceConfig::default();
        ok.validate(100).unwrap();

        let bad_tau = GuidanceConfig {
            tau: -0.1,
            ..GuidanceConfig::default()
        };
        assert!(bad_tau.validate(100).is_err());

        let bad_window = GuidanceConfig {
            apply_from_t: Some(5),
            apply_until_t: 10,
            ..GuidanceConfig::default()
        };
        assert!(bad_window.validate(100).is_err());

        let windowed = GuidanceConfig {
            apply_from_t: Some(80),
            apply_until_t: 20,
            ..GuidanceConfig::default()
        };
        windowed.validate(100).unwrap();
        assert!(windowed.active_at(50, 100));
        assert!(!windowed.active_at(10, 100));
        assert!(!windowed.active_at(90, 100));
    }
}
