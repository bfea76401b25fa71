//! BVH export with positions baked into translation channels.
//!
//! The motions here are positional (no joint rotations are solved), so every
//! joint gets three translation channels and zero rest offsets; per frame,
//! each joint's channels carry its offset from its parent, which lets
//! standard BVH players reconstruct the absolute positions. Units are meters
//! and the frame time matches the repo-wide 20 fps.

use std::fmt::Write as _;

use crate::error::Result;
use crate::motion::{GlobalMotion, FPS};
use crate::skeleton::{Skeleton, JOINT_COUNT};

fn write_joint(
    out: &mut String,
    skeleton: &Skeleton,
    children: &[Vec<usize>],
    joint: usize,
    depth: usize,
    order: &mut Vec<usize>,
) {
    let pad = "  ".repeat(depth);
    let name = &skeleton.joint_names()[joint];
    if depth == 0 {
        let _ = writeln!(out, "ROOT {name}");
    } else {
        let _ = writeln!(out, "{pad}JOINT {name}");
    }
    let _ = writeln!(out, "{pad}{{");
    let _ = writeln!(out, "{pad}  OFFSET 0.0 0.0 0.0");
    let _ = writeln!(out, "{pad}  CHANNELS 3 Xposition Yposition Zposition");
    order.push(joint);
    let kids = &children[joint];
    if kids.is_empty() {
        let _ = writeln!(out, "{pad}  End Site");
        let _ = writeln!(out, "{pad}  {{");
        let _ = writeln!(out, "{pad}    OFFSET 0.0 0.05 0.0");
        let _ = writeln!(out, "{pad}  }}");
    } else {
        for &k in kids {
            write_joint(out, skeleton, children, k, depth + 1, order);
        }
    }
    let _ = writeln!(out, "{pad}}}");
}

/// Render a motion as BVH text.
pub fn to_bvh(motion: &GlobalMotion, skeleton: &Skeleton) -> Result<String> {
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); JOINT_COUNT];
    for j in 1..JOINT_COUNT {
        children[skeleton.parent(j)].push(j);
    }

    let mut out = String::from("HIERARCHY\n");
    let mut order = Vec::with_capacity(JOINT_COUNT);
    write_joint(
        &mut out,
        skeleton,
        &children,
        skeleton.root_index(),
        0,
        &mut order,
    );

    let n = motion.n_frames();
    let _ = writeln!(out, "MOTION");
    let _ = writeln!(out, "Frames: {n}");
    let _ = writeln!(out, "Frame Time: {}", 1.0 / FPS);
    for frame in 0..n {
        let mut fields = Vec::with_capacity(JOINT_COUNT * 3);
        for &j in &order {
            let p = motion.joint(frame, j);
            let rel = if j == skeleton.root_index() {
                p
            } else {
                let q = motion.joint(frame, skeleton.parent(j));
                [p[0] - q[0], p[1] - q[1], p[2] - q[2]]
            };
            for v in rel {
                fields.push(format!("{v:.6}"));
            }
        }
        let _ = writeln!(out, "{}", fields.join(" "));
    }
    Ok(out)
}
