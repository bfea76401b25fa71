//! Canonicalization of external pose-estimator output.
//!
//! Estimators emit joint arrays in their own conventions (often 64 joints,
//! camera-oriented axes). Importing maps a subset onto the canonical 22-joint
//! skeleton via an index table, flips the axes into the repo's Y-up frame,
//! and normalizes the pose's placement.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::FramePose;
use crate::skeleton::JOINT_COUNT;

/// Raw estimator output:
/// `{ "source": "...", "joints": [[x,y,z], ...], "names"?: [...] }`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RawPoseFile {
    pub source: String,
    pub joints: Vec<[f64; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub names: Option<Vec<String>>,
}

impl RawPoseFile {
    pub fn validate(&self) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::InvalidInput("pose file has no joints".into()));
        }
        if let Some(names) = &self.names {
            if names.len() != self.joints.len() {
                return Err(Error::InvalidInput(format!(
                    "{} names for {} joints",
                    names.len(),
                    self.joints.len()
                )));
            }
        }
        if self.joints.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite joint coordinate".into()));
        }
        Ok(())
    }
}

/// Canonical-joint -> raw-index table (serialized as a plain 22-element
/// array). The default is the identity prefix: SMPL-family estimators list
/// the 22 body joints first in canonical order, so indices 0..21 map through
/// unchanged. Override with a table file for other conventions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct JointMapTable {
    pub indices: Vec<usize>,
}

impl JointMapTable {
    pub fn identity_prefix() -> Self {
        JointMapTable {
            indices: (0..JOINT_COUNT).collect(),
        }
    }

    pub fn validate(&self, raw_len: usize) -> Result<()> {
        if self.indices.len() != JOINT_COUNT {
            return Err(Error::JointMap(format!(
                "table has {} entries, expected {JOINT_COUNT}",
                self.indices.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in &self.indices {
            if i >= raw_len {
                return Err(Error::JointMap(format!(
                    "index {i} out of range for a {raw_len}-joint pose"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::JointMap(format!("index {i} used twice")));
            }
        }
        Ok(())
    }
}

impl Default for JointMapTable {
    fn default() -> Self {
        Self::identity_prefix()
    }
}

/// Select the canonical joints from the raw array: output joint `i` is raw
/// joint `table[i]`.
pub fn map_joints(raw: &RawPoseFile, table: &JointMapTable) -> Result<Array2<f64>> {
    raw.validate()?;
    table.validate(raw.joints.len())?;
    let mut out = Array2::zeros((JOINT_COUNT, 3));
    for (i, &src) in table.indices.iter().enumerate() {
        for k in 0..3 {
            out[[i, k]] = raw.joints[src][k];
        }
    }
    Ok(out)
}

/// Axis convention flip: `(x, y, z) -> (x, -y, -z)`. A linear involution that
/// preserves Euclidean norms.
pub fn axis_transform(joints: &Array2<f64>) -> Array2<f64> {
    let mut out = joints.clone();
    for mut row in out.rows_mut() {
        row[1] = -row[1];
        row[2] = -row[2];
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CanonicalizeOptions {
    /// Shift vertically so the lowest joint touches the ground. Off by
    /// default (a trajectory constraint usually supplies the height).
    pub floor_contact: bool,
}

/// Move the pelvis to the horizontal origin (and optionally ground the
/// pose). A pure translation: inter-joint vectors are untouched.
pub fn canonicalize(joints: &Array2<f64>, options: CanonicalizeOptions) -> Result<FramePose> {
    if joints.dim() != (JOINT_COUNT, 3) {
        return Err(Error::ShapeMismatch(format!(
            "pose must be {JOINT_COUNT} x 3, got {} x {}",
            joints.nrows(),
            joints.ncols()
        )));
    }
    let px = joints[[0, 0]];
    let pz = joints[[0, 2]];
    let dy = if options.floor_contact {
        joints
            .rows()
            .into_iter()
            .map(|r| r[1])
            .fold(f64::INFINITY, f64::min)
    } else {
        0.0
    };
    let mut out = joints.clone();
    for mut row in out.rows_mut() {
        row[0] -= px;
        row[1] -= dy;
        row[2] -= pz;
    }
    FramePose::new(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn raw(n: usize, rng: &mut ChaCha8Rng) -> RawPoseFile {
        RawPoseFile {
            source: "test".into(),
            joints: (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect(),
            names: None,
        }
    }

    #[test]
    fn identity_prefix_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let r = raw(22, &mut rng);
        let mapped = map_joints(&r, &JointMapTable::identity_prefix()).unwrap();
        for i in 0..22 {
            for k in 0..3 {
                assert_eq!(mapped[[i, k]], r.joints[i][k]);
            }
        }
    }

    #[test]
    fn permuted_table_permutes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let r = raw(30, &mut rng);
        let mut indices: Vec<usize> = (3..25).collect();
        indices.swap(0, 10);
        let table = JointMapTable { indices: indices.clone() };
        let mapped = map_joints(&r, &table).unwrap();
        for i in 0..22 {
            assert_eq!(mapped[[i, 0]], r.joints[indices[i]][0]);
        }
    }

    #[test]
    fn sixty_four_joint_input_maps_to_22() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = raw(64, &mut rng);
        let mapped = map_joints(&r, &JointMapTable::identity_prefix()).unwrap();
        assert_eq!(mapped.dim(), (22, 3));
    }

    #[test]
    fn bad_tables_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let r = raw(22, &mut rng);
        let out_of_range = JointMapTable {
            indices: (1..23).collect(),
        };
        assert!(matches!(
            map_joints(&r, &out_of_range),
            Err(Error::JointMap(_))
        ));
        let mut dup: Vec<usize> = (0..22).collect();
        dup[5] = 4;
        assert!(map_joints(&r, &JointMapTable { indices: dup }).is_err());
        let short = JointMapTable {
            indices: (0..21).collect(),
        };
        assert!(map_joints(&r, &short).is_err());
    }

    #[test]
    fn axis_transform_example_and_involution() {
        let mut j = Array2::zeros((22, 3));
        j[[0, 0]] = 1.0;
        j[[0, 1]] = 2.0;
        j[[0, 2]] = 3.0;
        let t = axis_transform(&j);
        assert_eq!([t[[0, 0]], t[[0, 1]], t[[0, 2]]], [1.0, -2.0, -3.0]);
        // Involution; the origin is fixed.
        let tt = axis_transform(&t);
        assert_eq!(tt, j);
        assert_eq!([t[[5, 0]], t[[5, 1]], t[[5, 2]]], [0.0, 0.0, 0.0]);

        // Norm preservation on random joints.
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut j = Array2::zeros((22, 3));
        for v in j.iter_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        let t = axis_transform(&j);
        for i in 0..22 {
            let n0 = j.row(i).iter().map(|v| v * v).sum::<f64>();
            let n1 = t.row(i).iter().map(|v| v * v).sum::<f64>();
            assert!((n0 - n1).abs() < 1e-15);
        }
    }

    #[test]
    fn canonicalize_centers_and_grounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut j = Array2::zeros((22, 3));
        for v in j.iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        j[[0, 0]] = 0.7;
        j[[0, 2]] = -0.4;
        // Float 0.3 m above the lowest point being 0.3.
        let min_y = j.column(1).iter().cloned().fold(f64::INFINITY, f64::min);

        let centered = canonicalize(&j, CanonicalizeOptions::default()).unwrap();
        assert_eq!(centered.root()[0], 0.0);
        assert_eq!(centered.root()[2], 0.0);
        // Heights preserved with floor contact off.
        assert_eq!(centered.root()[1], j[[0, 1]]);

        let grounded = canonicalize(
            &j,
            CanonicalizeOptions {
                floor_contact: true,
            },
        )
        .unwrap();
        let new_min = (0..22).map(|i| grounded.joint(i)[1]).fold(f64::INFINITY, f64::min);
        assert!(new_min.abs() < 1e-12);
        assert!((grounded.root()[1] - (j[[0, 1]] - min_y)).abs() < 1e-12);

        // Translation preserves pairwise distances exactly.
        for a in 0..22 {
            for b in 0..22 {
                for k in 0..3 {
                    let before = j[[a, k]] - j[[b, k]];
                    let after = grounded.joint(a)[k] - grounded.joint(b)[k];
                    assert!((before - after).abs() < 1e-12);
                }
            }
        }

        // Already-canonical pose is unchanged.
        let again = canonicalize(centered.data(), CanonicalizeOptions::default()).unwrap();
        assert_eq!(again, centered);
    }
}
