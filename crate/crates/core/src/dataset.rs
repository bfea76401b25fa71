//! Procedural synthetic motion corpus.
//!
//! Each sample walks a planned root trajectory with an analytic gait:
//! stance feet are pinned to fixed ground anchors (so ground-truth foot
//! skating is near zero by construction), swing feet follow an eased arc
//! between anchors, knees come from two-bone IK, and arms counter-swing.
//! One class replaces the right-arm swing with a raised waving hand.
//!
//! Motions are built in global space and converted through the feature
//! representation, so every stored sample round-trips exactly.

use ndarray::Array3;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::kinematics::{from_global, rotate_pose_yaw, rotate_xz, to_global};
use crate::motion::{GlobalMotion, MotionFeatures};
use crate::skeleton as sk;
use crate::trajplan::{plan, CurveKind, CurveSpec, SpeedProfile};

/// Motion classes used as condition labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionClass {
    WalkLine,
    WalkCircle,
    WalkSCurve,
    WalkArc,
    WaveWhileWalking,
}

pub const N_CLASSES: usize = 5;

pub const CLASSES: [MotionClass; N_CLASSES] = [
    MotionClass::WalkLine,
    MotionClass::WalkCircle,
    MotionClass::WalkSCurve,
    MotionClass::WalkArc,
    MotionClass::WaveWhileWalking,
];

impl MotionClass {
    pub fn label(self) -> usize {
        CLASSES.iter().position(|c| *c == self).unwrap()
    }

    pub fn from_label(label: usize) -> Result<Self> {
        CLASSES
            .get(label)
            .copied()
            .ok_or_else(|| Error::Config(format!("class label {label} outside [0, {N_CLASSES})")))
    }
}

/// Generator parameters drawn for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenParams {
    pub class: MotionClass,
    /// Root speed, m/frame.
    pub speed: f64,
    /// Nominal pelvis height, m.
    pub height: f64,
    /// Frames per single step (stance and swing each last this long).
    pub step_frames: usize,
    pub bob_amp: f64,
    pub arm_swing: f64,
    pub sway_amp: f64,
    pub wave_hz: f64,
    /// Constant torso yaw relative to the travel direction (crab-walk
    /// offset); keeps pose orientation from being derivable from the
    /// trajectory alone.
    pub body_yaw: f64,
    pub curve: CurveSpec,
}

/// One corpus entry: the motion in both representations plus the label and
/// the parameters that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub features: MotionFeatures,
    pub global: GlobalMotion,
    pub label: usize,
    pub params: GenParams,
}

// Body proportions (meters).
const HIP_LATERAL: f64 = 0.10;
const HIP_DROP: f64 = 0.06;
const THIGH_LEN: f64 = 0.40;
const SHIN_LEN: f64 = 0.40;
const ANKLE_OVER_FOOT: f64 = 0.08;
const ANKLE_BEHIND_FOOT: f64 = 0.12;
const FOOT_REST_Y: f64 = 0.02;
const FOOT_LATERAL: f64 = 0.11;
const SWING_CLEARANCE: f64 = 0.12;
const SPINE_STEP: f64 = 0.12;
const NECK_OVER_SPINE3: f64 = 0.10;
const HEAD_OVER_NECK: f64 = 0.15;
const COLLAR_LATERAL: f64 = 0.07;
const SHOULDER_LATERAL: f64 = 0.18;
const UPPER_ARM: f64 = 0.28;
const FOREARM: f64 = 0.26;

fn draw_params(class: MotionClass, n_frames: usize, rng: &mut ChaCha8Rng) -> GenParams {
    let speed = rng.gen_range(0.025..0.045); // m/frame (0.5 .. 0.9 m/s)
    let height = rng.gen_range(0.88..0.94);
    let step_frames = rng.gen_range(10..=14usize);
    let arclen = speed * (n_frames - 1) as f64;
    let start_heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);

    let kind = match class {
        MotionClass::WalkLine | MotionClass::WaveWhileWalking => {
            let dir = [start_heading.sin(), start_heading.cos()];
            CurveKind::Line {
                start: [0.0, height, 0.0],
                end: [arclen * dir[0], height, arclen * dir[1]],
            }
        }
        MotionClass::WalkCircle => {
            let radius = rng.gen_range(1.2..3.0);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            // Place the circle so the path starts at the origin.
            CurveKind::Circle {
                center: [
                    -radius * start_angle.cos(),
                    height,
                    -radius * start_angle.sin(),
                ],
                radius,
                start_angle,
                turns: dir * arclen / (std::f64::consts::TAU * radius),
            }
        }
        MotionClass::WalkSCurve => {
            let radius = rng.gen_range(0.9..2.2);
            CurveKind::SCurve {
                start: [0.0, height, 0.0],
                heading: start_heading,
                radius,
                length: arclen,
            }
        }
        MotionClass::WalkArc => {
            let radius = rng.gen_range(1.5..3.5);
            let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let start_angle = rng.gen_range(0.0..std::f64::consts::TAU);
            CurveKind::Arc {
                center: [
                    -radius * start_angle.cos(),
                    height,
                    -radius * start_angle.sin(),
                ],
                radius,
                start_angle,
                end_angle: start_angle + dir * arclen / radius,
            }
        }
    };

    GenParams {
        class,
        speed,
        height,
        step_frames,
        bob_amp: rng.gen_range(0.010..0.022),
        arm_swing: rng.gen_range(0.35..0.6),
        sway_amp: rng.gen_range(0.008..0.018),
        wave_hz: rng.gen_range(1.5..2.5),
        body_yaw: rng.gen_range(-0.5..0.5),
        curve: CurveSpec {
            kind,
            n_frames,
            height: Some(height),
            speed: SpeedProfile::Uniform,
        },
    }
}

/// Quintic smoothstep.
fn ease(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * u * (10.0 - 15.0 * u + 6.0 * u * u)
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// Offset `(lateral, up, forward)` rotated into world by heading `phi`.
fn body_offset(phi: f64, lateral: f64, up: f64, forward: f64) -> [f64; 3] {
    let (x, z) = rotate_xz(phi, lateral, forward);
    [x, up, z]
}

/// Two-bone IK: knee position between `hip` and `ankle`, bending toward the
/// heading direction.
fn knee_ik(hip: [f64; 3], ankle: [f64; 3], phi: f64) -> [f64; 3] {
    let diff = [ankle[0] - hip[0], ankle[1] - hip[1], ankle[2] - hip[2]];
    let d = (diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]).sqrt();
    let d_eff = d.clamp(1e-6, THIGH_LEN + SHIN_LEN - 1e-9);
    let u = [diff[0] / d, diff[1] / d, diff[2] / d];
    let along = (THIGH_LEN * THIGH_LEN - SHIN_LEN * SHIN_LEN + d_eff * d_eff) / (2.0 * d_eff);
    let lift = (THIGH_LEN * THIGH_LEN - along * along).max(0.0).sqrt();
    // Bend direction: forward, made orthogonal to the hip-ankle axis.
    let fwd = body_offset(phi, 0.0, 0.0, 1.0);
    let dot = fwd[0] * u[0] + fwd[1] * u[1] + fwd[2] * u[2];
    let mut w = [fwd[0] - dot * u[0], fwd[1] - dot * u[1], fwd[2] - dot * u[2]];
    let wn = (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt();
    if wn < 1e-9 {
        w = [0.0, 0.0, 0.0];
    } else {
        w = [w[0] / wn, w[1] / wn, w[2] / wn];
    }
    [
        hip[0] + along * u[0] + lift * w[0],
        hip[1] + along * u[1] + lift * w[1],
        hip[2] + along * u[2] + lift * w[2],
    ]
}

/// Per-foot gait: stance anchors pinned to the ground along the path, eased
/// swing arcs between them. Returns the foot-end joint position.
struct FootTrack {
    /// Anchor per stance interval index.
    anchors: Vec<[f64; 2]>,
    offset: usize,
    step_frames: usize,
}

impl FootTrack {
    fn build(
        path: &[[f64; 3]],
        headings: &[f64],
        lateral: f64,
        offset: usize,
        step_frames: usize,
    ) -> FootTrack {
        let n = path.len() as i64;
        let cycle = 2 * step_frames;
        // Stance interval j covers frames [j*cycle - offset, j*cycle - offset + step_frames).
        // Cover indices touching [-cycle, n + cycle).
        let j_min = -2i64;
        let j_max = (n as f64 / cycle as f64).ceil() as i64 + 2;
        let mut anchors = Vec::new();
        for j in j_min..=j_max {
            let mid = j * cycle as i64 - offset as i64 + step_frames as i64 / 2;
            let m = mid.clamp(0, n - 1) as usize;
            let base = path[m];
            let off = body_offset(headings[m], lateral, 0.0, 0.02);
            anchors.push([base[0] + off[0], base[2] + off[2]]);
        }
        FootTrack {
            anchors,
            offset,
            step_frames,
        }
    }

    fn anchor(&self, j: i64) -> [f64; 2] {
        let idx = (j + 2).clamp(0, self.anchors.len() as i64 - 1) as usize;
        self.anchors[idx]
    }

    fn position(&self, frame: usize) -> [f64; 3] {
        let cycle = 2 * self.step_frames;
        let shifted = frame + self.offset;
        let j = (shifted / cycle) as i64;
        let phase = shifted % cycle;
        if phase < self.step_frames {
            let a = self.anchor(j);
            [a[0], FOOT_REST_Y, a[1]]
        } else {
            // Swing from anchor j to anchor j+1; lands exactly at the next
            // stance's first frame.
            let u = (phase - self.step_frames + 1) as f64 / (self.step_frames + 1) as f64;
            let s = ease(u);
            let a = self.anchor(j);
            let b = self.anchor(j + 1);
            let lift = SWING_CLEARANCE * (std::f64::consts::PI * u).sin().powf(0.7);
            [
                a[0] + s * (b[0] - a[0]),
                FOOT_REST_Y + lift,
                a[1] + s * (b[1] - a[1]),
            ]
        }
    }
}

/// Build the full-body global motion for one parameter draw.
fn build_motion(params: &GenParams) -> Result<GlobalMotion> {
    let traj = plan(&params.curve)?;
    let n = traj.n_frames();
    let path: Vec<[f64; 3]> = (0..n).map(|i| traj.point(i)).collect();

    // Heading = direction of travel, last frame repeats.
    let mut headings = vec![0.0f64; n];
    for i in 0..n {
        let (a, b) = if i + 1 < n {
            (path[i], path[i + 1])
        } else {
            (path[i - 1], path[i])
        };
        let dx = b[0] - a[0];
        let dz = b[2] - a[2];
        headings[i] = if dx * dx + dz * dz > 1e-16 {
            dx.atan2(dz)
        } else if i > 0 {
            headings[i - 1]
        } else {
            0.0
        };
    }

    let s = params.step_frames;
    let body_headings: Vec<f64> = headings.iter().map(|h| h + params.body_yaw).collect();
    let left = FootTrack::build(&path, &body_headings, FOOT_LATERAL, 0, s);
    let right = FootTrack::build(&path, &body_headings, -FOOT_LATERAL, s, s);

    let mut data = Array3::zeros((n, sk::JOINT_COUNT, 3));
    let set = |frame: usize, joint: usize, p: [f64; 3], data: &mut Array3<f64>| {
        data[[frame, joint, 0]] = p[0];
        data[[frame, joint, 1]] = p[1];
        data[[frame, joint, 2]] = p[2];
    };

    for i in 0..n {
        let phi = body_headings[i];
        let gait_phase = std::f64::consts::PI * i as f64 / s as f64;
        let bob = 0.5 * params.bob_amp * (2.0 * gait_phase).sin();
        let sway = params.sway_amp * gait_phase.sin();
        let root = [path[i][0], params.height + bob, path[i][2]];

        set(i, sk::PELVIS, root, &mut data);
        let l_hip = add3(root, body_offset(phi, HIP_LATERAL, -HIP_DROP, 0.0));
        let r_hip = add3(root, body_offset(phi, -HIP_LATERAL, -HIP_DROP, 0.0));
        set(i, sk::LEFT_HIP, l_hip, &mut data);
        set(i, sk::RIGHT_HIP, r_hip, &mut data);

        // Spine chain with a little lateral sway.
        let spine1 = add3(root, body_offset(phi, sway, SPINE_STEP, 0.0));
        let spine2 = add3(root, body_offset(phi, 1.5 * sway, 2.0 * SPINE_STEP, 0.01));
        let spine3 = add3(root, body_offset(phi, 1.8 * sway, 3.0 * SPINE_STEP, 0.01));
        set(i, 3, spine1, &mut data);
        set(i, 6, spine2, &mut data);
        set(i, 9, spine3, &mut data);
        let neck = add3(spine3, [0.0, NECK_OVER_SPINE3, 0.0]);
        set(i, sk::NECK, neck, &mut data);
        set(
            i,
            sk::HEAD,
            add3(neck, body_offset(phi, 0.0, HEAD_OVER_NECK, 0.02)),
            &mut data,
        );
        set(
            i,
            13,
            add3(spine3, body_offset(phi, COLLAR_LATERAL, 0.05, 0.01)),
            &mut data,
        );
        set(
            i,
            14,
            add3(spine3, body_offset(phi, -COLLAR_LATERAL, 0.05, 0.01)),
            &mut data,
        );

        // Feet, ankles, knees.
        let l_foot = left.position(i);
        let r_foot = right.position(i);
        set(i, sk::LEFT_FOOT, l_foot, &mut data);
        set(i, sk::RIGHT_FOOT, r_foot, &mut data);
        let l_ankle = add3(l_foot, body_offset(phi, 0.0, ANKLE_OVER_FOOT, -ANKLE_BEHIND_FOOT));
        let r_ankle = add3(r_foot, body_offset(phi, 0.0, ANKLE_OVER_FOOT, -ANKLE_BEHIND_FOOT));
        set(i, sk::LEFT_ANKLE, l_ankle, &mut data);
        set(i, sk::RIGHT_ANKLE, r_ankle, &mut data);
        set(i, sk::LEFT_KNEE, knee_ik(l_hip, l_ankle, phi), &mut data);
        set(i, sk::RIGHT_KNEE, knee_ik(r_hip, r_ankle, phi), &mut data);

        // Arms: counter-swing; the wave class raises the right arm instead.
        let l_shoulder = add3(spine3, body_offset(phi, SHOULDER_LATERAL, 0.05, 0.0));
        let r_shoulder = add3(spine3, body_offset(phi, -SHOULDER_LATERAL, 0.05, 0.0));
        set(i, sk::LEFT_SHOULDER, l_shoulder, &mut data);
        set(i, sk::RIGHT_SHOULDER, r_shoulder, &mut data);

        let beta_l = params.arm_swing * gait_phase.sin();
        let l_elbow = add3(
            l_shoulder,
            body_offset(phi, 0.02, -UPPER_ARM * beta_l.cos(), UPPER_ARM * beta_l.sin()),
        );
        let bend_l = beta_l + 0.35;
        let l_wrist = add3(
            l_elbow,
            body_offset(phi, 0.01, -FOREARM * bend_l.cos(), FOREARM * bend_l.sin()),
        );
        set(i, sk::LEFT_ELBOW, l_elbow, &mut data);
        set(i, sk::LEFT_WRIST, l_wrist, &mut data);

        if params.class == MotionClass::WaveWhileWalking {
            let wave_phase =
                std::f64::consts::TAU * params.wave_hz * i as f64 / crate::motion::FPS;
            let r_elbow = add3(r_shoulder, body_offset(phi, -0.10, 0.16, 0.04));
            let r_wrist = add3(
                r_elbow,
                body_offset(phi, -0.04 - 0.12 * wave_phase.sin(), 0.22, 0.03),
            );
            set(i, sk::RIGHT_ELBOW, r_elbow, &mut data);
            set(i, sk::RIGHT_WRIST, r_wrist, &mut data);
        } else {
            let beta_r = -beta_l;
            let r_elbow = add3(
                r_shoulder,
                body_offset(phi, -0.02, -UPPER_ARM * beta_r.cos(), UPPER_ARM * beta_r.sin()),
            );
            let bend_r = beta_r + 0.35;
            let r_wrist = add3(
                r_elbow,
                body_offset(phi, -0.01, -FOREARM * bend_r.cos(), FOREARM * bend_r.sin()),
            );
            set(i, sk::RIGHT_ELBOW, r_elbow, &mut data);
            set(i, sk::RIGHT_WRIST, r_wrist, &mut data);
        }
    }

    GlobalMotion::new(data)
}

/// Generate one sample deterministically from `(seed, index)`.
pub fn gen_sample(index: usize, n_frames: usize, seed: u64) -> Result<SyntheticSample> {
    let class = CLASSES[index % N_CLASSES];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let params = draw_params(class, n_frames, &mut rng);
    let constructed = build_motion(&params)?;
    let features = from_global(&constructed)?;
    // Store the reconstruction so features and global agree exactly.
    let global = to_global(&features);
    Ok(SyntheticSample {
        features,
        global,
        label: class.label(),
        params,
    })
}

/// Generate the corpus. Deterministic in `(n_samples, n_frames, seed)` and
/// balanced across classes.
pub fn gen_dataset(n_samples: usize, n_frames: usize, seed: u64) -> Result<Vec<SyntheticSample>> {
    if n_samples == 0 {
        return Err(Error::Config("dataset needs at least one sample".into()));
    }
    if !(16..=196).contains(&n_frames) {
        return Err(Error::Config(format!(
            "n_frames must lie in [16, 196], got {n_frames}"
        )));
    }
    use rayon::prelude::*;
    (0..n_samples)
        .into_par_iter()
        .map(|i| gen_sample(i, n_frames, seed))
        .collect()
}

/// Pin ground-truth values at `sparsity` frames chosen uniformly without
/// replacement; trajectory and pose masks are drawn independently.
pub fn sample_control(
    sample: &SyntheticSample,
    sparsity: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ControlSpec> {
    let n = sample.global.n_frames();
    if sparsity == 0 || sparsity > n {
        return Err(Error::InvalidInput(format!(
            "sparsity {sparsity} outside [1, {n}]"
        )));
    }
    let traj_frames: Vec<usize> = rand::seq::index::sample(rng, n, sparsity).into_vec();
    let pose_frames: Vec<usize> = rand::seq::index::sample(rng, n, sparsity).into_vec();
    Ok(ControlSpec::from_motion_frames(
        &sample.global,
        &traj_frames,
        &pose_frames,
    ))
}

/// The five sparsity levels, clamped to the sequence length (196 denotes full
/// density and becomes `n_frames` on shorter sequences).
pub fn sparsity_levels(n_frames: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for level in [1usize, 2, 5, 49, 196] {
        let s = level.min(n_frames);
        if !out.contains(&s) {
            out.push(s);
        }
    }
    out
}

const CACHE_MAGIC: &[u8; 4] = b"MDDS";
const CACHE_VERSION: u32 = 1;

/// Write the corpus to a seed-stamped cache file (features stored exactly as
/// f64, globals rebuilt on load).
pub fn save_cache(
    path: &std::path::Path,
    dataset: &[SyntheticSample],
    n_frames: usize,
    seed: u64,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&seed.to_le_bytes());
    buf.extend_from_slice(&(dataset.len() as u32).to_le_bytes());
    buf.extend_from_slice(&(n_frames as u32).to_le_bytes());
    for s in dataset {
        buf.extend_from_slice(&(s.label as u32).to_le_bytes());
        let params = serde_json::to_vec(&s.params)?;
        buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
        buf.extend_from_slice(&params);
        for v in s.features.data().iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Load a cache written by [`save_cache`], verifying the stamp matches the
/// requested `(n_samples, n_frames, seed)`.
pub fn load_cache(
    path: &std::path::Path,
    n_samples: usize,
    n_frames: usize,
    seed: u64,
) -> Result<Vec<SyntheticSample>> {
    let buf = std::fs::read(path)?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(Error::InvalidInput("dataset cache truncated".into()));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != CACHE_MAGIC {
        return Err(Error::InvalidInput("not a dataset cache file".into()));
    }
    let ver = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if ver != CACHE_VERSION {
        return Err(Error::InvalidInput(format!(
            "dataset cache version {ver}, expected {CACHE_VERSION}"
        )));
    }
    let file_seed = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap());
    let file_n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let file_frames = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    if file_seed != seed || file_n != n_samples || file_frames != n_frames {
        return Err(Error::InvalidInput(format!(
            "dataset cache stamp (seed {file_seed}, {file_n} samples, {file_frames} frames) \
             does not match the request (seed {seed}, {n_samples} samples, {n_frames} frames)"
        )));
    }
    let mut out = Vec::with_capacity(file_n);
    for _ in 0..file_n {
        let label = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let plen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let params: GenParams = serde_json::from_slice(take(&mut pos, plen)?)?;
        let n_vals = file_frames * crate::motion::FEATURE_DIM;
        let bytes = take(&mut pos, 8 * n_vals)?;
        let mut data = ndarray::Array2::zeros((file_frames, crate::motion::FEATURE_DIM));
        for (slot, chunk) in data.iter_mut().zip(bytes.chunks_exact(8)) {
            *slot = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        let features = MotionFeatures::new(data)?;
        let global = to_global(&features);
        out.push(SyntheticSample {
            features,
            global,
            label,
            params,
        });
    }
    Ok(out)
}

/// Rotate each constrained pose about the vertical axis through its own
/// pelvis by an independent uniform angle in `[-max_yaw, max_yaw]`.
/// Trajectory constraints are untouched.
pub fn augment_rotation(c: &ControlSpec, rng: &mut ChaCha8Rng, max_yaw: f64) -> ControlSpec {
    let mut out = c.clone();
    if max_yaw <= 0.0 {
        return out;
    }
    for n in 0..c.n_frames() {
        if c.pose_mask()[n] {
            let angle = rng.gen_range(-max_yaw..max_yaw);
            let pose = c.pose_frame(n);
            let rotated = rotate_pose_yaw(&pose, angle, pose.root());
            out.set_pose_frame(n, &rotated);
        }
    }
    out
}
