//! Procedural root-trajectory planning from parametric curves.
//!
//! All curves are planned in the horizontal plane and emitted at a constant
//! height. Sampling is closed-form at equal arclength steps, so spacing is
//! exact rather than numerically integrated.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::control::ControlSpec;
use crate::error::{Error, Result};
use crate::motion::FPS;

/// Curve family and its parameters. Points are `[x, y, z]`; the y component
/// of anchor points supplies the default height.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CurveKind {
    Line {
        start: [f64; 3],
        end: [f64; 3],
    },
    Circle {
        center: [f64; 3],
        radius: f64,
        start_angle: f64,
        /// Signed number of revolutions (fractions allowed).
        turns: f64,
    },
    Arc {
        center: [f64; 3],
        radius: f64,
        start_angle: f64,
        end_angle: f64,
    },
    /// Two mirrored tangent arcs of equal radius; `length` is the total
    /// arclength. Walking direction at the start is `heading` (radians, the
    /// yaw convention: 0 faces +z). With an even sample count the inflection
    /// falls between samples, where chord lengths differ from the in-arc
    /// chords at second order in the step size.
    SCurve {
        start: [f64; 3],
        heading: f64,
        radius: f64,
        length: f64,
    },
}

/// How arclength advances per frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeedProfile {
    /// Traverse the whole curve: step = length / (n_frames - 1).
    Uniform,
    /// Fixed arclength per frame, starting at the curve's start.
    StepLength(f64),
    /// Fixed speed in meters per second at the repo-wide frame rate.
    SpeedMps(f64),
}

impl Default for SpeedProfile {
    fn default() -> Self {
        SpeedProfile::Uniform
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    #[serde(flatten)]
    pub kind: CurveKind,
    pub n_frames: usize,
    /// Constant output height; defaults to the anchor point's y.
    #[serde(default)]
    pub height: Option<f64>,
    #[serde(default)]
    pub speed: SpeedProfile,
}

/// A planned root path: N x 3 positions in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Array2<f64>,
}

impl Trajectory {
    pub fn n_frames(&self) -> usize {
        self.points.nrows()
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, n: usize) -> [f64; 3] {
        [
            self.points[[n, 0]],
            self.points[[n, 1]],
            self.points[[n, 2]],
        ]
    }

    /// A control spec with this trajectory pinned at every frame and no pose
    /// constraints.
    pub fn to_control_spec(&self) -> ControlSpec {
        let mut spec = ControlSpec::empty(self.n_frames());
        for n in 0..self.n_frames() {
            spec.set_traj_point(n, self.point(n));
        }
        spec
    }

    /// The same path translated horizontally so frame 0 sits at x = z = 0.
    pub fn translated_to_origin(&self) -> Trajectory {
        let mut points = self.points.clone();
        let (x0, z0) = (points[[0, 0]], points[[0, 2]]);
        for mut row in points.rows_mut() {
            row[0] -= x0;
            row[2] -= z0;
        }
        Trajectory { points }
    }

    /// CSV rows `frame,x,y,z` with a header.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("frame,x,y,z\n");
        for n in 0..self.n_frames() {
            let p = self.point(n);
            out.push_str(&format!("{n},{},{},{}\n", p[0], p[1], p[2]));
        }
        out
    }
}

/// Horizontal geometry of one curve: total length plus a closed-form
/// point-at-arclength map.
struct CurveGeometry {
    length: f64,
    height: f64,
    point_at: Box<dyn Fn(f64) -> [f64; 2]>,
}

fn geometry(spec: &CurveSpec) -> Result<CurveGeometry> {
    let height = spec.height;
    match spec.kind {
        CurveKind::Line { start, end } => {
            let dx = end[0] - start[0];
            let dz = end[2] - start[2];
            let len = (dx * dx + dz * dz).sqrt();
            if len <= 0.0 {
                return Err(Error::CurveSpec("line has zero horizontal length".into()));
            }
            Ok(CurveGeometry {
                length: len,
                height: height.unwrap_or(start[1]),
                point_at: Box::new(move |s| {
                    let u = s / len;
                    [start[0] + u * dx, start[2] + u * dz]
                }),
            })
        }
        CurveKind::Circle {
            center,
            radius,
            start_angle,
            turns,
        } => {
            if radius <= 0.0 {
                return Err(Error::CurveSpec(format!("circle radius {radius} must be > 0")));
            }
            if turns == 0.0 {
                return Err(Error::CurveSpec("circle needs a nonzero turn count".into()));
            }
            let span = 2.0 * std::f64::consts::PI * turns;
            let len = span.abs() * radius;
            Ok(CurveGeometry {
                length: len,
                height: height.unwrap_or(center[1]),
                point_at: Box::new(move |s| {
                    let a = start_angle + span.signum() * s / radius;
                    [center[0] + radius * a.cos(), center[2] + radius * a.sin()]
                }),
            })
        }
        CurveKind::Arc {
            center,
            radius,
            start_angle,
            end_angle,
        } => {
            if radius <= 0.0 {
                return Err(Error::CurveSpec(format!("arc radius {radius} must be > 0")));
            }
            let span = end_angle - start_angle;
            if span == 0.0 {
                return Err(Error::CurveSpec("arc spans zero angle".into()));
            }
            let len = span.abs() * radius;
            Ok(CurveGeometry {
                length: len,
                height: height.unwrap_or(center[1]),
                point_at: Box::new(move |s| {
                    let a = start_angle + span.signum() * s / radius;
                    [center[0] + radius * a.cos(), center[2] + radius * a.sin()]
                }),
            })
        }
        CurveKind::SCurve {
            start,
            heading,
            radius,
            length,
        } => {
            if radius <= 0.0 || length <= 0.0 {
                return Err(Error::CurveSpec(
                    "s-curve radius and length must be > 0".into(),
                ));
            }
            let half = length / 2.0;
            // First arc turns left at rate 1/r, second arc mirrors it.
            let psi1 = heading + half / radius;
            let mid = [
                start[0] + radius * (heading.cos() - psi1.cos()),
                start[2] + radius * (psi1.sin() - heading.sin()),
            ];
            Ok(CurveGeometry {
                length,
                height: height.unwrap_or(start[1]),
                point_at: Box::new(move |s| {
                    if s <= half {
                        let psi = heading + s / radius;
                        [
                            start[0] + radius * (heading.cos() - psi.cos()),
                            start[2] + radius * (psi.sin() - heading.sin()),
                        ]
                    } else {
                        let w = s - half;
                        let psi = psi1 - w / radius;
                        [
                            mid[0] + radius * (psi.cos() - psi1.cos()),
                            mid[1] + radius * (psi1.sin() - psi.sin()),
                        ]
                    }
                }),
            })
        }
    }
}

fn arclength_steps(spec: &CurveSpec, length: f64) -> Result<Vec<f64>> {
    if spec.n_frames < 2 {
        return Err(Error::CurveSpec(format!(
            "n_frames must be >= 2, got {}",
            spec.n_frames
        )));
    }
    let step = match spec.speed {
        SpeedProfile::Uniform => length / (spec.n_frames - 1) as f64,
        SpeedProfile::StepLength(ds) => ds,
        SpeedProfile::SpeedMps(v) => v / FPS,
    };
    if !(step > 0.0) {
        return Err(Error::CurveSpec(format!("per-frame arclength step {step} must be > 0")));
    }
    let total = step * (spec.n_frames - 1) as f64;
    if total > length * (1.0 + 1e-9) {
        return Err(Error::CurveSpec(format!(
            "speed profile covers {total:.6} m but the curve is only {length:.6} m long"
        )));
    }
    Ok((0..spec.n_frames).map(|i| (i as f64 * step).min(length)).collect())
}

/// Sample one curve at equal arclength.
pub fn plan(spec: &CurveSpec) -> Result<Trajectory> {
    let geo = geometry(spec)?;
    let steps = arclength_steps(spec, geo.length)?;
    let mut points = Array2::zeros((spec.n_frames, 3));
    for (i, s) in steps.iter().enumerate() {
        let [x, z] = (geo.point_at)(*s);
        points[[i, 0]] = x;
        points[[i, 1]] = geo.height;
        points[[i, 2]] = z;
    }
    Ok(Trajectory { points })
}

/// Start and end points of a curve (at its resolved height).
pub fn endpoints(spec: &CurveSpec) -> Result<([f64; 3], [f64; 3])> {
    let geo = geometry(spec)?;
    let [sx, sz] = (geo.point_at)(0.0);
    let [ex, ez] = (geo.point_at)(geo.length);
    Ok(([sx, geo.height, sz], [ex, geo.height, ez]))
}

/// Concatenate segment trajectories; each segment must start where the
/// previous one ends (within 1e-6 m) and the shared boundary frame is not
/// duplicated.
pub fn compose(segments: &[CurveSpec]) -> Result<Trajectory> {
    if segments.is_empty() {
        return Err(Error::CurveSpec("composition needs at least one segment".into()));
    }
    let mut rows: Vec<[f64; 3]> = Vec::new();
    let mut prev_end: Option<[f64; 3]> = None;
    for (i, seg) in segments.iter().enumerate() {
        let (start, end) = endpoints(seg)?;
        if let Some(pe) = prev_end {
            let gap = ((start[0] - pe[0]).powi(2)
                + (start[1] - pe[1]).powi(2)
                + (start[2] - pe[2]).powi(2))
            .sqrt();
            if gap > 1e-6 {
                return Err(Error::Composition { segment: i, gap });
            }
        }
        let traj = plan(seg)?;
        let skip = if prev_end.is_some() { 1 } else { 0 };
        for n in skip..traj.n_frames() {
            rows.push(traj.point(n));
        }
        prev_end = Some(end);
    }
    let mut points = Array2::zeros((rows.len(), 3));
    for (i, p) in rows.iter().enumerate() {
        points[[i, 0]] = p[0];
        points[[i, 1]] = p[1];
        points[[i, 2]] = p[2];
    }
    Ok(Trajectory { points })
}
