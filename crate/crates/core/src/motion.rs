//! Motion data types and their JSON formats.
//!
//! Two representations of the same motion:
//!
//! - [`MotionFeatures`]: the per-frame feature matrix the denoiser consumes.
//!   67 channels per frame: root yaw angular velocity (rad/frame), root-local
//!   linear velocity x/z (m/frame), root height (m), and 21 non-root joint
//!   positions in root-local yaw-aligned coordinates (63 values).
//! - [`GlobalMotion`]: per-frame global joint positions (N x 22 x 3, meters,
//!   Y-up, ground plane y = 0).
//!
//! [`crate::kinematics`] converts between the two.

use ndarray::{Array2, Array3, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::skeleton::{Skeleton, JOINT_COUNT};

/// Channels per frame in the feature representation.
pub const FEATURE_DIM: usize = 67;

/// Frame rate of every motion handled by this crate.
pub const FPS: f64 = 20.0;

/// Maximum sequence length.
pub const MAX_FRAMES: usize = 196;

/// Feature channel indices.
pub mod channel {
    /// Root yaw angular velocity, rad/frame.
    pub const YAW_RATE: usize = 0;
    /// Root-local linear velocity x, m/frame.
    pub const VEL_X: usize = 1;
    /// Root-local linear velocity z, m/frame.
    pub const VEL_Z: usize = 2;
    /// Root height, m.
    pub const HEIGHT: usize = 3;
    /// First channel of non-root joint `j` (1..=21), component `c` (0..3).
    pub const fn local_joint(j: usize, c: usize) -> usize {
        4 + 3 * (j - 1) + c
    }
}

fn all_finite(values: impl IntoIterator<Item = f64>) -> bool {
    values.into_iter().all(f64::is_finite)
}

/// Per-frame feature matrix (N x 67) in the root-relative representation.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    data: Array2<f64>,
}

impl MotionFeatures {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.ncols() != FEATURE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "feature matrix must have {FEATURE_DIM} columns, got {}",
                data.ncols()
            )));
        }
        if data.nrows() == 0 {
            return Err(Error::InvalidInput("motion must have at least 1 frame".into()));
        }
        if !all_finite(data.iter().copied()) {
            return Err(Error::InvalidInput("non-finite value in motion features".into()));
        }
        Ok(MotionFeatures { data })
    }

    pub fn zeros(n_frames: usize) -> Self {
        MotionFeatures {
            data: Array2::zeros((n_frames, FEATURE_DIM)),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array2<f64> {
        self.data
    }

    pub fn frame(&self, n: usize) -> ArrayView1<'_, f64> {
        self.data.row(n)
    }

    pub fn yaw_rate(&self, n: usize) -> f64 {
        self.data[[n, channel::YAW_RATE]]
    }

    pub fn velocity(&self, n: usize) -> [f64; 2] {
        [self.data[[n, channel::VEL_X]], self.data[[n, channel::VEL_Z]]]
    }

    pub fn height(&self, n: usize) -> f64 {
        self.data[[n, channel::HEIGHT]]
    }

    /// Local position of non-root joint `j` (1..=21) at frame `n`.
    pub fn local_joint(&self, n: usize, j: usize) -> [f64; 3] {
        let base = channel::local_joint(j, 0);
        [
            self.data[[n, base]],
            self.data[[n, base + 1]],
            self.data[[n, base + 2]],
        ]
    }

    pub fn to_json(&self) -> FeaturesJson {
        FeaturesJson {
            fps: FPS,
            dim: FEATURE_DIM,
            data: self
                .data
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        }
    }

    pub fn from_json(json: &FeaturesJson) -> Result<Self> {
        if json.dim != FEATURE_DIM {
            return Err(Error::InvalidInput(format!(
                "feature file has dim {}, expected {FEATURE_DIM}",
                json.dim
            )));
        }
        let n = json.data.len();
        let mut data = Array2::zeros((n, FEATURE_DIM));
        for (i, row) in json.data.iter().enumerate() {
            if row.len() != FEATURE_DIM {
                return Err(Error::ShapeMismatch(format!(
                    "feature row {i} has {} values, expected {FEATURE_DIM}",
                    row.len()
                )));
            }
            for (j, v) in row.iter().enumerate() {
                data[[i, j]] = *v;
            }
        }
        MotionFeatures::new(data)
    }
}

/// Serialized form of [`MotionFeatures`]:
/// `{ "fps": 20, "dim": 67, "data": [[f64 x 67], ...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeaturesJson {
    pub fps: f64,
    pub dim: usize,
    pub data: Vec<Vec<f64>>,
}

/// Per-frame global joint positions (N x 22 x 3, meters).
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalMotion {
    data: Array3<f64>,
}

impl GlobalMotion {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (_, j, c) = data.dim();
        if j != JOINT_COUNT || c != 3 {
            return Err(Error::ShapeMismatch(format!(
                "global motion must be N x {JOINT_COUNT} x 3, got N x {j} x {c}"
            )));
        }
        if data.dim().0 == 0 {
            return Err(Error::InvalidInput("motion must have at least 1 frame".into()));
        }
        if !all_finite(data.iter().copied()) {
            return Err(Error::InvalidInput("non-finite value in global motion".into()));
        }
        Ok(GlobalMotion { data })
    }

    pub fn zeros(n_frames: usize) -> Self {
        GlobalMotion {
            data: Array3::zeros((n_frames, JOINT_COUNT, 3)),
        }
    }

    pub fn n_frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array3<f64> {
        &mut self.data
    }

    pub fn joint(&self, frame: usize, joint: usize) -> [f64; 3] {
        [
            self.data[[frame, joint, 0]],
            self.data[[frame, joint, 1]],
            self.data[[frame, joint, 2]],
        ]
    }

    /// One frame as a 22 x 3 pose.
    pub fn frame_pose(&self, frame: usize) -> FramePose {
        FramePose {
            data: self
                .data
                .index_axis(ndarray::Axis(0), frame)
                .to_owned(),
        }
    }

    pub fn to_json(&self, skeleton: &Skeleton) -> MotionJson {
        MotionJson {
            fps: FPS,
            joints: skeleton.joint_names().to_vec(),
            frames: (0..self.n_frames())
                .map(|n| {
                    (0..JOINT_COUNT)
                        .map(|j| {
                            let p = self.joint(n, j);
                            [p[0], p[1], p[2]]
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn from_json(json: &MotionJson) -> Result<Self> {
        let n = json.frames.len();
        if n == 0 {
            return Err(Error::InvalidInput("motion file has no frames".into()));
        }
        let mut data = Array3::zeros((n, JOINT_COUNT, 3));
        for (i, frame) in json.frames.iter().enumerate() {
            if frame.len() != JOINT_COUNT {
                return Err(Error::ShapeMismatch(format!(
                    "frame {i} has {} joints, expected {JOINT_COUNT}",
                    frame.len()
                )));
            }
            for (j, p) in frame.iter().enumerate() {
                data[[i, j, 0]] = p[0];
                data[[i, j, 1]] = p[1];
                data[[i, j, 2]] = p[2];
            }
        }
        GlobalMotion::new(data)
    }
}

/// Serialized form of [`GlobalMotion`]:
/// `{ "fps": 20, "joints": [names...], "frames": [[[x,y,z] x 22], ...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MotionJson {
    pub fps: f64,
    pub joints: Vec<String>,
    pub frames: Vec<Vec<[f64; 3]>>,
}

/// A single 22 x 3 pose, meters. Index 0 is the pelvis.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePose {
    data: Array2<f64>,
}

impl FramePose {
    pub fn new(data: Array2<f64>) -> Result<Self> {
        if data.dim() != (JOINT_COUNT, 3) {
            return Err(Error::ShapeMismatch(format!(
                "pose must be {JOINT_COUNT} x 3, got {} x {}",
                data.nrows(),
                data.ncols()
            )));
        }
        if !all_finite(data.iter().copied()) {
            return Err(Error::InvalidInput("non-finite value in pose".into()));
        }
        Ok(FramePose { data })
    }

    pub fn zeros() -> Self {
        FramePose {
            data: Array2::zeros((JOINT_COUNT, 3)),
        }
    }

    pub fn from_joints(joints: &[[f64; 3]]) -> Result<Self> {
        if joints.len() != JOINT_COUNT {
            return Err(Error::ShapeMismatch(format!(
                "pose must have {JOINT_COUNT} joints, got {}",
                joints.len()
            )));
        }
        let mut data = Array2::zeros((JOINT_COUNT, 3));
        for (j, p) in joints.iter().enumerate() {
            data[[j, 0]] = p[0];
            data[[j, 1]] = p[1];
            data[[j, 2]] = p[2];
        }
        FramePose::new(data)
    }

    pub fn data(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array2<f64> {
        &mut self.data
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn joint(&self, j: usize) -> [f64; 3] {
        [self.data[[j, 0]], self.data[[j, 1]], self.data[[j, 2]]]
    }

    pub fn set_joint(&mut self, j: usize, p: [f64; 3]) {
        self.data[[j, 0]] = p[0];
        self.data[[j, 1]] = p[1];
        self.data[[j, 2]] = p[2];
    }

    pub fn root(&self) -> [f64; 3] {
        self.joint(0)
    }

    /// A single-frame motion holding just this pose (the on-disk pose format
    /// reuses the motion schema).
    pub fn to_motion(&self) -> GlobalMotion {
        let mut data = Array3::zeros((1, JOINT_COUNT, 3));
        data.index_axis_mut(ndarray::Axis(0), 0).assign(&self.data);
        GlobalMotion { data }
    }
}
