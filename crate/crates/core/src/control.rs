//! Trajectory and keyframe pose constraints.

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{FramePose, GlobalMotion};
use crate::skeleton::JOINT_COUNT;

/// Per-frame control signals: a root trajectory with a validity mask, and
/// full-body keyframe poses with a validity mask. Masked-off entries are
/// ignored and may be zero-filled.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    n_frames: usize,
    traj: Array2<f64>,
    traj_mask: Vec<bool>,
    pose: Array3<f64>,
    pose_mask: Vec<bool>,
}

impl ControlSpec {
    /// A spec with all mask bits off.
    pub fn empty(n_frames: usize) -> Self {
        ControlSpec {
            n_frames,
            traj: Array2::zeros((n_frames, 3)),
            traj_mask: vec![false; n_frames],
            pose: Array3::zeros((n_frames, JOINT_COUNT, 3)),
            pose_mask: vec![false; n_frames],
        }
    }

    pub fn new(
        traj: Array2<f64>,
        traj_mask: Vec<bool>,
        pose: Array3<f64>,
        pose_mask: Vec<bool>,
    ) -> Result<Self> {
        let n = traj_mask.len();
        if traj.dim() != (n, 3) {
            return Err(Error::ShapeMismatch(format!(
                "trajectory must be {n} x 3, got {} x {}",
                traj.nrows(),
                traj.ncols()
            )));
        }
        if pose_mask.len() != n || pose.dim() != (n, JOINT_COUNT, 3) {
            return Err(Error::ShapeMismatch(format!(
                "pose block must be {n} x {JOINT_COUNT} x 3 with an {n}-long mask"
            )));
        }
        let finite = traj.iter().chain(pose.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite value in control spec".into()));
        }
        Ok(ControlSpec {
            n_frames: n,
            traj,
            traj_mask,
            pose,
            pose_mask,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn traj_mask(&self) -> &[bool] {
        &self.traj_mask
    }

    pub fn pose_mask(&self) -> &[bool] {
        &self.pose_mask
    }

    pub fn traj_point(&self, n: usize) -> [f64; 3] {
        [self.traj[[n, 0]], self.traj[[n, 1]], self.traj[[n, 2]]]
    }

    pub fn pose_joint(&self, n: usize, j: usize) -> [f64; 3] {
        [
            self.pose[[n, j, 0]],
            self.pose[[n, j, 1]],
            self.pose[[n, j, 2]],
        ]
    }

    pub fn pose_frame(&self, n: usize) -> FramePose {
        FramePose::new(self.pose.index_axis(ndarray::Axis(0), n).to_owned())
            .expect("stored pose constraints are valid")
    }

    pub fn set_traj_point(&mut self, n: usize, p: [f64; 3]) {
        self.traj[[n, 0]] = p[0];
        self.traj[[n, 1]] = p[1];
        self.traj[[n, 2]] = p[2];
        self.traj_mask[n] = true;
    }

    pub fn set_pose_frame(&mut self, n: usize, pose: &FramePose) {
        for j in 0..JOINT_COUNT {
            let p = pose.joint(j);
            self.pose[[n, j, 0]] = p[0];
            self.pose[[n, j, 1]] = p[1];
            self.pose[[n, j, 2]] = p[2];
        }
        self.pose_mask[n] = true;
    }

    pub fn clear_traj(&mut self, n: usize) {
        self.traj_mask[n] = false;
    }

    pub fn clear_pose(&mut self, n: usize) {
        self.pose_mask[n] = false;
    }

    pub fn traj_count(&self) -> usize {
        self.traj_mask.iter().filter(|&&b| b).count()
    }

    pub fn pose_count(&self) -> usize {
        self.pose_mask.iter().filter(|&&b| b).count()
    }

    pub fn has_traj(&self) -> bool {
        self.traj_count() > 0
    }

    pub fn has_pose(&self) -> bool {
        self.pose_count() > 0
    }

    /// Build a spec pinning ground-truth values of `motion` at the given
    /// frames (trajectory = root positions, poses = full frames).
    pub fn from_motion_frames(
        motion: &GlobalMotion,
        traj_frames: &[usize],
        pose_frames: &[usize],
    ) -> Self {
        let mut spec = ControlSpec::empty(motion.n_frames());
        for &n in traj_frames {
            spec.set_traj_point(n, motion.joint(n, 0));
        }
        for &n in pose_frames {
            let pose = motion.frame_pose(n);
            spec.set_pose_frame(n, &pose);
        }
        spec
    }

    pub fn to_json(&self) -> ControlSpecJson {
        ControlSpecJson {
            n_frames: self.n_frames,
            traj: (0..self.n_frames)
                .map(|n| {
                    if self.traj_mask[n] {
                        let p = self.traj_point(n);
                        Some([p[0], p[1], p[2]])
                    } else {
                        None
                    }
                })
                .collect(),
            pose: (0..self.n_frames)
                .map(|n| {
                    if self.pose_mask[n] {
                        Some(
                            (0..JOINT_COUNT)
                                .map(|j| {
                                    let p = self.pose_joint(n, j);
                                    [p[0], p[1], p[2]]
                                })
                                .collect(),
                        )
                    } else {
                        None
                    }
                })
                .collect(),
        }
    }

    pub fn from_json(json: &ControlSpecJson) -> Result<Self> {
        let n = json.n_frames;
        if json.traj.len() != n || json.pose.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "control spec declares {n} frames but lists {} trajectory / {} pose entries",
                json.traj.len(),
                json.pose.len()
            )));
        }
        let mut spec = ControlSpec::empty(n);
        for (i, entry) in json.traj.iter().enumerate() {
            if let Some(p) = entry {
                spec.set_traj_point(i, *p);
            }
        }
        for (i, entry) in json.pose.iter().enumerate() {
            if let Some(joints) = entry {
                if joints.len() != JOINT_COUNT {
                    return Err(Error::ShapeMismatch(format!(
                        "pose constraint at frame {i} has {} joints, expected {JOINT_COUNT}",
                        joints.len()
                    )));
                }
                let pose = FramePose::from_joints(joints)?;
                spec.set_pose_frame(i, &pose);
            }
        }
        let finite = spec.traj.iter().chain(spec.pose.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidInput("non-finite value in control spec".into()));
        }
        Ok(spec)
    }
}

/// Serialized form of [`ControlSpec`]: `null` encodes a masked-off frame.
/// `{ "n_frames": N, "traj": [[x,y,z]|null, ...], "pose": [[[x,y,z] x 22]|null, ...] }`
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlSpecJson {
    pub n_frames: usize,
    pub traj: Vec<Option<[f64; 3]>>,
    pub pose: Vec<Option<Vec<[f64; 3]>>>,
}
