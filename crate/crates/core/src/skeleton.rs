//! The canonical 22-joint skeleton.
//!
//! Joint order follows the common SMPL-style body convention: pelvis first,
//! then alternating left/right limb joints and the spine chain. The parent
//! graph is a tree rooted at the pelvis (index 0).

use crate::error::{Error, Result};

/// Number of joints in the canonical skeleton.
pub const JOINT_COUNT: usize = 22;

/// Canonical joint names, in index order.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis",
    "left_hip",
    "right_hip",
    "spine1",
    "left_knee",
    "right_knee",
    "spine2",
    "left_ankle",
    "right_ankle",
    "spine3",
    "left_foot",
    "right_foot",
    "neck",
    "left_collar",
    "right_collar",
    "head",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
];

/// Parent index per joint; the root's parent is itself.
pub const PARENT_INDEX: [usize; JOINT_COUNT] = [
    0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19,
];

pub const PELVIS: usize = 0;
pub const LEFT_HIP: usize = 1;
pub const RIGHT_HIP: usize = 2;
pub const LEFT_KNEE: usize = 4;
pub const RIGHT_KNEE: usize = 5;
pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;
pub const NECK: usize = 12;
pub const HEAD: usize = 15;
pub const LEFT_SHOULDER: usize = 16;
pub const RIGHT_SHOULDER: usize = 17;
pub const LEFT_ELBOW: usize = 18;
pub const RIGHT_ELBOW: usize = 19;
pub const LEFT_WRIST: usize = 20;
pub const RIGHT_WRIST: usize = 21;

/// Skeleton description: joint names plus the parent tree.
#[derive(Debug, Clone, PartialEq)]
pub struct Skeleton {
    joint_names: Vec<String>,
    parent_index: Vec<usize>,
    root_index: usize,
}

impl Skeleton {
    /// The canonical 22-joint skeleton used everywhere in this crate.
    pub fn canonical() -> Self {
        Skeleton {
            joint_names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            parent_index: PARENT_INDEX.to_vec(),
            root_index: PELVIS,
        }
    }

    /// Build a skeleton from explicit tables, validating the invariants:
    /// exactly 22 joints, and a parent graph that is a tree rooted at joint 0.
    pub fn new(joint_names: Vec<String>, parent_index: Vec<usize>) -> Result<Self> {
        if joint_names.len() != JOINT_COUNT || parent_index.len() != JOINT_COUNT {
            return Err(Error::InvalidInput(format!(
                "skeleton must have exactly {JOINT_COUNT} joints, got {} names / {} parents",
                joint_names.len(),
                parent_index.len()
            )));
        }
        if parent_index[0] != 0 {
            return Err(Error::InvalidInput(
                "root joint (index 0) must be its own parent".into(),
            ));
        }
        // Every non-root joint must reach the root without cycles.
        for start in 1..JOINT_COUNT {
            let mut j = start;
            let mut hops = 0;
            while j != 0 {
                let p = parent_index[j];
                if p >= JOINT_COUNT {
                    return Err(Error::InvalidInput(format!(
                        "joint {j} has out-of-range parent {p}"
                    )));
                }
                if p == j {
                    return Err(Error::InvalidInput(format!(
                        "non-root joint {j} is its own parent"
                    )));
                }
                j = p;
                hops += 1;
                if hops > JOINT_COUNT {
                    return Err(Error::InvalidInput(format!(
                        "parent graph has a cycle involving joint {start}"
                    )));
                }
            }
        }
        Ok(Skeleton {
            joint_names,
            parent_index,
            root_index: 0,
        })
    }

    pub fn joint_count(&self) -> usize {
        JOINT_COUNT
    }

    pub fn root_index(&self) -> usize {
        self.root_index
    }

    pub fn joint_names(&self) -> &[String] {
        &self.joint_names
    }

    pub fn parent_index(&self) -> &[usize] {
        &self.parent_index
    }

    pub fn parent(&self, joint: usize) -> usize {
        self.parent_index[joint]
    }

    /// Indices of the two foot-end joints used by the foot-skating metric.
    pub fn foot_joints(&self) -> [usize; 2] {
        [LEFT_FOOT, RIGHT_FOOT]
    }

    /// Indices of the hip joints used for heading extraction.
    pub fn hip_joints(&self) -> [usize; 2] {
        [LEFT_HIP, RIGHT_HIP]
    }
}

impl Default for Skeleton {
    fn default() -> Self {
        Self::canonical()
    }
}
