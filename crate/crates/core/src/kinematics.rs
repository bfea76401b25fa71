//! The local-to-global motion transform and its inverse.
//!
//! Feature-space motions store per-frame yaw rate, yaw-local root velocity,
//! root height, and yaw-local joint offsets. [`to_global`] integrates these
//! into absolute joint positions:
//!
//! - global yaw: `theta[n] = sum of yaw rates of frames < n` (frame 0 faces
//!   the reference direction, yaw 0),
//! - root xz: cumulative sum of per-frame local velocities, each rotated by
//!   the yaw of its own frame (frame 0 starts at the origin),
//! - root y: taken directly from the height channel,
//! - non-root joints: root position plus the local offset rotated by the
//!   frame's yaw.
//!
//! The transform is deterministic and differentiable everywhere;
//! [`to_global_vjp`] is its hand-derived vector-Jacobian product, used by the
//! guidance gradient.
//!
//! [`from_global`] inverts the transform. Heading is extracted from the
//! cross-hip axis (rotated 90 degrees to give the facing direction) and
//! measured relative to frame 0, so the reconstruction reproduces the input
//! exactly up to translating the frame-0 root to the horizontal origin —
//! the feature representation has no slot for an absolute start position.

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::motion::{channel, FramePose, GlobalMotion, MotionFeatures, FEATURE_DIM};
use crate::skeleton::{JOINT_COUNT, LEFT_HIP, PELVIS, RIGHT_HIP};

/// Rotate `(x, z)` by a yaw angle about the vertical axis.
#[inline]
pub fn rotate_xz(theta: f64, x: f64, z: f64) -> (f64, f64) {
    let (s, c) = theta.sin_cos();
    (c * x + s * z, -s * x + c * z)
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * std::f64::consts::PI);
    if a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    } else if a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Per-frame global yaw angles implied by the yaw-rate channel.
pub fn global_yaw(x: &MotionFeatures) -> Vec<f64> {
    let n = x.n_frames();
    let mut theta = vec![0.0; n];
    for i in 1..n {
        theta[i] = theta[i - 1] + x.yaw_rate(i - 1);
    }
    theta
}

/// Transform a feature-space motion into global joint positions.
pub fn to_global(x: &MotionFeatures) -> GlobalMotion {
    let n = x.n_frames();
    let theta = global_yaw(x);
    // One sin/cos per frame; every rotation in the frame reuses it.
    let sc: Vec<(f64, f64)> = theta.iter().map(|t| t.sin_cos()).collect();

    // Root xz path: cumulative sum of rotated local velocities.
    let mut root_xz = vec![(0.0f64, 0.0f64); n];
    for i in 1..n {
        let [vx, vz] = x.velocity(i - 1);
        let (s, c) = sc[i - 1];
        let gx = c * vx + s * vz;
        let gz = -s * vx + c * vz;
        root_xz[i] = (root_xz[i - 1].0 + gx, root_xz[i - 1].1 + gz);
    }

    let mut g = Array3::zeros((n, JOINT_COUNT, 3));
    for i in 0..n {
        let (px, pz) = root_xz[i];
        let h = x.height(i);
        let (s, c) = sc[i];
        g[[i, PELVIS, 0]] = px;
        g[[i, PELVIS, 1]] = h;
        g[[i, PELVIS, 2]] = pz;
        for j in 1..JOINT_COUNT {
            let [lx, ly, lz] = x.local_joint(i, j);
            let rx = c * lx + s * lz;
            let rz = -s * lx + c * lz;
            g[[i, j, 0]] = px + rx;
            g[[i, j, 1]] = h + ly;
            g[[i, j, 2]] = pz + rz;
        }
    }
    GlobalMotion::new(g).expect("to_global produces a valid motion from valid features")
}

/// Vector-Jacobian product of [`to_global`]: given a cotangent `d_global`
/// (N x 22 x 3), return the gradient with respect to the feature matrix
/// (N x 67).
///
/// Channels feeding frame `n` are the yaw/velocity channels of frames `< n`
/// plus frame `n`'s own height and joint offsets, so the returned matrix is
/// sparse in exactly that pattern.
pub fn to_global_vjp(x: &MotionFeatures, d_global: &Array3<f64>) -> Array2<f64> {
    let n = x.n_frames();
    assert_eq!(
        d_global.dim(),
        (n, JOINT_COUNT, 3),
        "cotangent shape must match the global motion"
    );
    let theta = global_yaw(x);
    let sc: Vec<(f64, f64)> = theta.iter().map(|t| t.sin_cos()).collect();

    let mut dx = Array2::zeros((n, FEATURE_DIM));
    // d_root_xz[n] = gradient of the loss w.r.t. the frame-n root xz position
    // (all joints translate with the root).
    let mut d_root_xz = vec![(0.0f64, 0.0f64); n];
    // Direct yaw contributions from rotated joint offsets at each frame.
    let mut d_theta = vec![0.0f64; n];

    for i in 0..n {
        let (s, c) = sc[i];
        let mut dh = d_global[[i, PELVIS, 1]];
        let mut dpx = d_global[[i, PELVIS, 0]];
        let mut dpz = d_global[[i, PELVIS, 2]];
        for j in 1..JOINT_COUNT {
            let dgx = d_global[[i, j, 0]];
            let dgy = d_global[[i, j, 1]];
            let dgz = d_global[[i, j, 2]];
            dh += dgy;
            dpx += dgx;
            dpz += dgz;
            let [lx, _ly, lz] = x.local_joint(i, j);
            // d/dl through the rotation: R(theta)^T = R(-theta).
            let dlx = c * dgx - s * dgz;
            let dlz = s * dgx + c * dgz;
            let base = channel::local_joint(j, 0);
            dx[[i, base]] = dlx;
            dx[[i, base + 1]] = dgy;
            dx[[i, base + 2]] = dlz;
            // d/dtheta through the rotation of this offset.
            let tx = -s * lx + c * lz;
            let tz = -c * lx - s * lz;
            d_theta[i] += dgx * tx + dgz * tz;
        }
        dx[[i, channel::HEIGHT]] = dh;
        d_root_xz[i] = (dpx, dpz);
    }

    // Suffix sums over the root-position adjoints: the velocity of frame m
    // moves every root position at frames > m.
    let mut sx = 0.0;
    let mut sz = 0.0;
    for i in (0..n).rev() {
        if i + 1 < n {
            // sx/sz currently hold sum_{k >= i+1} d_root_xz[k].
            let [vx, vz] = x.velocity(i);
            let (s, c) = sc[i];
            dx[[i, channel::VEL_X]] = c * sx - s * sz;
            dx[[i, channel::VEL_Z]] = s * sx + c * sz;
            // Yaw also rotates the velocity applied at this frame.
            let tx = -s * vx + c * vz;
            let tz = -c * vx - s * vz;
            d_theta[i] += sx * tx + sz * tz;
        }
        sx += d_root_xz[i].0;
        sz += d_root_xz[i].1;
    }

    // theta[k] = sum of yaw rates of frames < k, so the yaw-rate channel of
    // frame m collects the theta-adjoints of all frames > m.
    let mut t_suffix = 0.0;
    for i in (0..n).rev() {
        if i + 1 < n {
            // after the loop step below ran for i+1, t_suffix = sum_{k >= i+1} d_theta[k]
            dx[[i, channel::YAW_RATE]] = t_suffix;
        }
        t_suffix += d_theta[i];
    }

    dx
}

/// Recover the feature representation from global joint positions.
///
/// The frame-0 root is mapped to the horizontal origin and yaw is measured
/// relative to frame 0 (the gauge the feature representation fixes), so
/// `to_global(from_global(g))` reproduces `g` exactly when `g` starts at the
/// origin, and reproduces it translated there otherwise. The last frame's
/// yaw-rate and velocity channels have no successor frame and are set to 0.
pub fn from_global(g: &GlobalMotion) -> Result<MotionFeatures> {
    let n = g.n_frames();

    // Heading per frame from the cross-hip axis rotated 90 degrees.
    let mut phi = vec![0.0f64; n];
    let mut have_prev = false;
    for i in 0..n {
        let l = g.joint(i, LEFT_HIP);
        let r = g.joint(i, RIGHT_HIP);
        let ax = l[0] - r[0];
        let az = l[2] - r[2];
        // Facing direction = hip axis rotated -90 deg about vertical: (-az, ax).
        let fx = -az;
        let fz = ax;
        if (fx * fx + fz * fz).sqrt() < 1e-9 {
            if have_prev {
                phi[i] = phi[i - 1];
            } else {
                return Err(Error::DegeneratePose(format!(
                    "frame {i}: hip axis has no horizontal component; heading undefined"
                )));
            }
        } else {
            phi[i] = fx.atan2(fz);
            have_prev = true;
        }
    }

    // Yaw relative to frame 0, accumulated through wrapped differences.
    let mut theta = vec![0.0f64; n];
    for i in 1..n {
        theta[i] = theta[i - 1] + wrap_angle(phi[i] - phi[i - 1]);
    }

    let mut data = Array2::zeros((n, FEATURE_DIM));
    for i in 0..n {
        let root = g.joint(i, PELVIS);
        data[[i, channel::HEIGHT]] = root[1];
        if i + 1 < n {
            data[[i, channel::YAW_RATE]] = theta[i + 1] - theta[i];
            let next = g.joint(i + 1, PELVIS);
            let (vx, vz) = rotate_xz(-theta[i], next[0] - root[0], next[2] - root[2]);
            data[[i, channel::VEL_X]] = vx;
            data[[i, channel::VEL_Z]] = vz;
        }
        for j in 1..JOINT_COUNT {
            let p = g.joint(i, j);
            let (lx, lz) = rotate_xz(-theta[i], p[0] - root[0], p[2] - root[2]);
            let base = channel::local_joint(j, 0);
            data[[i, base]] = lx;
            data[[i, base + 1]] = p[1] - root[1];
            data[[i, base + 2]] = lz;
        }
    }
    MotionFeatures::new(data)
}

/// Translate a pose so its pelvis sits at the origin. Inter-joint vectors are
/// preserved exactly (pure subtraction).
pub fn pelvis_center(p: &FramePose) -> FramePose {
    let root = p.root();
    let mut out = p.clone();
    for j in 0..JOINT_COUNT {
        let q = p.joint(j);
        out.set_joint(j, [q[0] - root[0], q[1] - root[1], q[2] - root[2]]);
    }
    out
}

/// Rotate a pose about the vertical axis through `center`.
pub fn rotate_pose_yaw(p: &FramePose, angle: f64, center: [f64; 3]) -> FramePose {
    let mut out = p.clone();
    for j in 0..JOINT_COUNT {
        let q = p.joint(j);
        let (x, z) = rotate_xz(angle, q[0] - center[0], q[2] - center[2]);
        out.set_joint(j, [center[0] + x, q[1], center[2] + z]);
    }
    out
}

/// Rotate every frame of a motion about the vertical axis through `center`.
pub fn rotate_motion_yaw(g: &GlobalMotion, angle: f64, center: [f64; 3]) -> GlobalMotion {
    let mut out = g.clone();
    for i in 0..g.n_frames() {
        for j in 0..JOINT_COUNT {
            let q = g.joint(i, j);
            let (x, z) = rotate_xz(angle, q[0] - center[0], q[2] - center[2]);
            out.data_mut()[[i, j, 0]] = center[0] + x;
            out.data_mut()[[i, j, 2]] = center[2] + z;
        }
    }
    out
}
