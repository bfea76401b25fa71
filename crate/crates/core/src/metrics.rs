//! Control-accuracy and realism-proxy metrics.
//!
//! Thresholded comparisons are strict (`>`): an error of exactly the
//! threshold does not count as a violation, and foot movement of exactly
//! 2.5 cm does not count as skating.

use serde::{Deserialize, Serialize};

use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::kinematics::pelvis_center;
use crate::motion::GlobalMotion;
use crate::skeleton::{JOINT_COUNT, LEFT_FOOT, PELVIS, RIGHT_FOOT};

/// Default keyframe location-error threshold, meters.
pub const ERR_THRESHOLD: f64 = 0.5;
/// Foot is "grounded" below this height, meters.
pub const FOOT_HEIGHT_MAX: f64 = 0.05;
/// Horizontal motion beyond this while grounded counts as skating, meters.
pub const SKATE_DISP: f64 = 0.025;

fn check_aligned(gen: &[&GlobalMotion], specs: &[&ControlSpec]) -> Result<()> {
    if gen.is_empty() {
        return Err(Error::InvalidInput("no sequences to evaluate".into()));
    }
    if gen.len() != specs.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} generated sequences vs {} control specs",
            gen.len(),
            specs.len()
        )));
    }
    for (i, (g, c)) in gen.iter().zip(specs.iter()).enumerate() {
        if g.n_frames() != c.n_frames() {
            return Err(Error::ShapeMismatch(format!(
                "sequence {i}: motion has {} frames, spec {}",
                g.n_frames(),
                c.n_frames()
            )));
        }
    }
    Ok(())
}

fn root_err(g: &GlobalMotion, c: &ControlSpec, n: usize) -> f64 {
    let p = g.joint(n, PELVIS);
    let t = c.traj_point(n);
    ((p[0] - t[0]).powi(2) + (p[1] - t[1]).powi(2) + (p[2] - t[2]).powi(2)).sqrt()
}

/// Fraction of sequences containing at least one controlled frame whose root
/// error exceeds the threshold.
pub fn traj_err(gen: &[&GlobalMotion], specs: &[&ControlSpec], threshold: f64) -> Result<f64> {
    check_aligned(gen, specs)?;
    let mut bad = 0usize;
    for (g, c) in gen.iter().zip(specs.iter()) {
        let violated = (0..g.n_frames())
            .any(|n| c.traj_mask()[n] && root_err(g, c, n) > threshold);
        if violated {
            bad += 1;
        }
    }
    Ok(bad as f64 / gen.len() as f64)
}

/// Fraction of individual controlled frames whose root error exceeds the
/// threshold.
pub fn loc_err(gen: &[&GlobalMotion], specs: &[&ControlSpec], threshold: f64) -> Result<f64> {
    check_aligned(gen, specs)?;
    let mut bad = 0usize;
    let mut total = 0usize;
    for (g, c) in gen.iter().zip(specs.iter()) {
        for n in 0..g.n_frames() {
            if c.traj_mask()[n] {
                total += 1;
                if root_err(g, c, n) > threshold {
                    bad += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyControl("no trajectory-controlled frames".into()));
    }
    Ok(bad as f64 / total as f64)
}

/// Mean root position error over all controlled frames, meters.
pub fn avg_err(gen: &[&GlobalMotion], specs: &[&ControlSpec]) -> Result<f64> {
    check_aligned(gen, specs)?;
    let mut sum = 0.0;
    let mut total = 0usize;
    for (g, c) in gen.iter().zip(specs.iter()) {
        for n in 0..g.n_frames() {
            if c.traj_mask()[n] {
                total += 1;
                sum += root_err(g, c, n);
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyControl("no trajectory-controlled frames".into()));
    }
    Ok(sum / total as f64)
}

/// Fraction of (frame, foot) events where a grounded foot translates
/// horizontally beyond the threshold: displacement from the previous frame
/// > 2.5 cm while the foot is below 5 cm in both frames. Sequences shorter
/// than 2 frames contribute no events; no events at all gives 0.
pub fn foot_skating_ratio(gen: &[&GlobalMotion]) -> f64 {
    let mut skating = 0usize;
    let mut total = 0usize;
    for g in gen {
        for n in 1..g.n_frames() {
            for foot in [LEFT_FOOT, RIGHT_FOOT] {
                total += 1;
                let a = g.joint(n - 1, foot);
                let b = g.joint(n, foot);
                let disp = ((b[0] - a[0]).powi(2) + (b[2] - a[2]).powi(2)).sqrt();
                if disp > SKATE_DISP && a[1] < FOOT_HEIGHT_MAX && b[1] < FOOT_HEIGHT_MAX {
                    skating += 1;
                }
            }
        }
    }
    if total == 0 {
        0.0
    } else {
        skating as f64 / total as f64
    }
}

/// Mean pelvis-centered joint distance between generated and reference poses
/// at pose-controlled frames, averaged over all controlled frames and
/// sequences.
pub fn pose_dist(gen: &[&GlobalMotion], specs: &[&ControlSpec]) -> Result<f64> {
    check_aligned(gen, specs)?;
    let mut sum = 0.0;
    let mut total = 0usize;
    for (g, c) in gen.iter().zip(specs.iter()) {
        for n in 0..g.n_frames() {
            if c.pose_mask()[n] {
                let gp = pelvis_center(&g.frame_pose(n));
                let rp = pelvis_center(&c.pose_frame(n));
                let mut mean = 0.0;
                for j in 0..JOINT_COUNT {
                    let a = gp.joint(j);
                    let b = rp.joint(j);
                    mean += ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2))
                        .sqrt();
                }
                sum += mean / JOINT_COUNT as f64;
                total += 1;
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyControl("no pose-controlled frames".into()));
    }
    Ok(sum / total as f64)
}

/// The five control-accuracy numbers for one evaluation group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValues {
    pub traj_err_50cm: f64,
    pub loc_err_50cm: f64,
    pub avg_err: f64,
    pub foot_skating_ratio: f64,
    pub pose_dist: f64,
}

impl MetricValues {
    pub fn compute(gen: &[&GlobalMotion], specs: &[&ControlSpec]) -> Result<Self> {
        Ok(MetricValues {
            traj_err_50cm: traj_err(gen, specs, ERR_THRESHOLD)?,
            loc_err_50cm: loc_err(gen, specs, ERR_THRESHOLD)?,
            avg_err: avg_err(gen, specs)?,
            foot_skating_ratio: foot_skating_ratio(gen),
            pose_dist: pose_dist(gen, specs)?,
        })
    }

    pub fn csv_fields(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.traj_err_50cm,
            self.loc_err_50cm,
            self.avg_err,
            self.foot_skating_ratio,
            self.pose_dist
        )
    }
}

/// Metrics for one sparsity level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub sparsity: usize,
    pub n_sequences: usize,
    #[serde(flatten)]
    pub metrics: MetricValues,
}

/// Per-sparsity breakdown plus the aggregate (mean over sparsity levels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sparsity: Vec<SparsityRow>,
    pub aggregate: MetricValues,
    pub n_sequences: usize,
}

impl EvalReport {
    /// Aggregate = unweighted mean of the per-sparsity rows.
    pub fn from_rows(rows: Vec<SparsityRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("report needs at least one row".into()));
        }
        let k = rows.len() as f64;
        let mut agg = MetricValues {
            traj_err_50cm: 0.0,
            loc_err_50cm: 0.0,
            avg_err: 0.0,
            foot_skating_ratio: 0.0,
            pose_dist: 0.0,
        };
        let mut n_sequences = 0;
        for r in &rows {
            agg.traj_err_50cm += r.metrics.traj_err_50cm / k;
            agg.loc_err_50cm += r.metrics.loc_err_50cm / k;
            agg.avg_err += r.metrics.avg_err / k;
            agg.foot_skating_ratio += r.metrics.foot_skating_ratio / k;
            agg.pose_dist += r.metrics.pose_dist / k;
            n_sequences += r.n_sequences;
        }
        Ok(EvalReport {
            per_sparsity: rows,
            aggregate: agg,
            n_sequences,
        })
    }

    /// Flat CSV: one row per sparsity level plus an `aggregate` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "sparsity,n_sequences,traj_err_50cm,loc_err_50cm,avg_err,foot_skating_ratio,pose_dist\n",
        );
        for r in &self.per_sparsity {
            out.push_str(&format!(
                "{},{},{}\n",
                r.sparsity,
                r.n_sequences,
                r.metrics.csv_fields()
            ));
        }
        out.push_str(&format!(
            "aggregate,{},{}\n",
            self.n_sequences,
            self.aggregate.csv_fields()
        ));
        out
    }
}
