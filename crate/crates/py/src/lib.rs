//! Python bindings: the motion representation, guidance losses, planner,
//! metrics, and a checkpoint-backed sampler.
//!
//! Matrices cross the boundary as nested lists (the corpus is desk-scale);
//! control specs and curve specs cross as the same JSON documents the CLI
//! uses.

use ndarray::{Array2, Array3};
use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use motiondiff::control::{ControlSpec, ControlSpecJson};
use motiondiff::dataset;
use motiondiff::diffusion::{sample_stream, SampleConfig, SamplerModel};
use motiondiff::error::{Error, ErrorClass};
use motiondiff::guidance::{self, GuidanceConfig};
use motiondiff::kinematics;
use motiondiff::motion::{FramePose, GlobalMotion, MotionFeatures, FEATURE_DIM};
use motiondiff::schedule::{make_schedule, ScheduleKind};
use motiondiff::skeleton::{JOINT_COUNT, JOINT_NAMES};
use motiondiff::trajplan;

fn py_err(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Io => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn features_from_py(rows: Vec<Vec<f64>>) -> PyResult<MotionFeatures> {
    let n = rows.len();
    if n == 0 {
        return Err(PyValueError::new_err("features need at least one frame"));
    }
    let mut data = Array2::zeros((n, FEATURE_DIM));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != FEATURE_DIM {
            return Err(PyValueError::new_err(format!(
                "feature row {i} has {} values, expected {FEATURE_DIM}",
                row.len()
            )));
        }
        for (j, v) in row.iter().enumerate() {
            data[[i, j]] = *v;
        }
    }
    MotionFeatures::new(data).map_err(py_err)
}

fn features_to_py(x: &MotionFeatures) -> Vec<Vec<f64>> {
    x.data().rows().into_iter().map(|r| r.to_vec()).collect()
}

fn motion_from_py(frames: Vec<Vec<[f64; 3]>>) -> PyResult<GlobalMotion> {
    let n = frames.len();
    if n == 0 {
        return Err(PyValueError::new_err("motion needs at least one frame"));
    }
    let mut data = Array3::zeros((n, JOINT_COUNT, 3));
    for (i, frame) in frames.iter().enumerate() {
        if frame.len() != JOINT_COUNT {
            return Err(PyValueError::new_err(format!(
                "frame {i} has {} joints, expected {JOINT_COUNT}",
                frame.len()
            )));
        }
        for (j, p) in frame.iter().enumerate() {
            for k in 0..3 {
                data[[i, j, k]] = p[k];
            }
        }
    }
    GlobalMotion::new(data).map_err(py_err)
}

fn motion_to_py(g: &GlobalMotion) -> Vec<Vec<[f64; 3]>> {
    (0..g.n_frames())
        .map(|i| (0..JOINT_COUNT).map(|j| g.joint(i, j)).collect())
        .collect()
}

fn pose_from_py(joints: Vec<[f64; 3]>) -> PyResult<FramePose> {
    FramePose::from_joints(&joints).map_err(py_err)
}

fn pose_to_py(p: &FramePose) -> Vec<[f64; 3]> {
    (0..JOINT_COUNT).map(|j| p.joint(j)).collect()
}

fn spec_from_json(text: &str) -> PyResult<ControlSpec> {
    let json: ControlSpecJson =
        serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?;
    ControlSpec::from_json(&json).map_err(py_err)
}

/// Names of the canonical 22 joints, in index order.
#[pyfunction]
fn joint_names() -> Vec<String> {
    JOINT_NAMES.iter().map(|s| s.to_string()).collect()
}

/// Integrate the 67-channel feature matrix into global joint positions
/// (frames x 22 x 3).
#[pyfunction]
fn to_global(features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<[f64; 3]>>> {
    let x = features_from_py(features)?;
    Ok(motion_to_py(&kinematics::to_global(&x)))
}

/// Invert the integration: global joint positions back to features.
#[pyfunction]
fn from_global(frames: Vec<Vec<[f64; 3]>>) -> PyResult<Vec<Vec<f64>>> {
    let g = motion_from_py(frames)?;
    Ok(features_to_py(&kinematics::from_global(&g).map_err(py_err)?))
}

/// Translate a pose so the pelvis sits at the origin.
#[pyfunction]
fn pelvis_center(pose: Vec<[f64; 3]>) -> PyResult<Vec<[f64; 3]>> {
    Ok(pose_to_py(&kinematics::pelvis_center(&pose_from_py(pose)?)))
}

/// Rotate a pose about the vertical axis through `center`.
#[pyfunction]
fn rotate_pose_yaw(pose: Vec<[f64; 3]>, angle: f64, center: [f64; 3]) -> PyResult<Vec<[f64; 3]>> {
    Ok(pose_to_py(&kinematics::rotate_pose_yaw(
        &pose_from_py(pose)?,
        angle,
        center,
    )))
}

/// Pose-estimator axis flip: (x, y, z) -> (x, -y, -z).
#[pyfunction]
fn axis_transform(joints: Vec<[f64; 3]>) -> Vec<[f64; 3]> {
    joints.iter().map(|p| [p[0], -p[1], -p[2]]).collect()
}

/// Masked mean root error against the spec's trajectory constraints.
#[pyfunction]
fn traj_loss(frames: Vec<Vec<[f64; 3]>>, spec_json: &str) -> PyResult<f64> {
    let g = motion_from_py(frames)?;
    guidance::traj_loss(&g, &spec_from_json(spec_json)?).map_err(py_err)
}

/// Masked mean aligned-pose error against the spec's pose constraints.
#[pyfunction]
fn pose_loss(frames: Vec<Vec<[f64; 3]>>, spec_json: &str) -> PyResult<f64> {
    let g = motion_from_py(frames)?;
    guidance::pose_loss(&g, &spec_from_json(spec_json)?).map_err(py_err)
}

/// Dynamic loss weighting; returns (alpha, zero_gradient).
#[pyfunction]
fn combined_alpha(l_traj: f64, l_pose: f64) -> (f64, bool) {
    let a = guidance::combined_alpha(l_traj, l_pose);
    (a.value, a.zero_gradient)
}

/// Analytic gradient of the combined guidance loss w.r.t. the features.
#[pyfunction]
fn loss_gradient(features: Vec<Vec<f64>>, spec_json: &str) -> PyResult<Vec<Vec<f64>>> {
    let x = features_from_py(features)?;
    let g = guidance::loss_gradient(&x, &spec_from_json(spec_json)?).map_err(py_err)?;
    Ok(g.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// Central-difference oracle for `loss_gradient`.
#[pyfunction]
fn fd_gradient(features: Vec<Vec<f64>>, spec_json: &str, h: f64) -> PyResult<Vec<Vec<f64>>> {
    let x = features_from_py(features)?;
    let g = guidance::fd_gradient(&x, &spec_from_json(spec_json)?, h).map_err(py_err)?;
    Ok(g.rows().into_iter().map(|r| r.to_vec()).collect())
}

/// One gradient-perturbation update of the features toward the constraints.
#[pyfunction]
#[pyo3(signature = (features, spec_json, tau, steps=1))]
fn perturb(
    features: Vec<Vec<f64>>,
    spec_json: &str,
    tau: f64,
    steps: usize,
) -> PyResult<Vec<Vec<f64>>> {
    let x = features_from_py(features)?;
    let cfg = GuidanceConfig {
        tau,
        steps_per_denoise: steps,
        ..GuidanceConfig::default()
    };
    let out = guidance::perturb(&x, &spec_from_json(spec_json)?, &cfg).map_err(py_err)?;
    Ok(features_to_py(&out))
}

/// Beta/alpha/alpha-bar tables: kind is "linear" or "cosine".
#[pyfunction]
fn schedule_tables(t_steps: usize, kind: &str) -> PyResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let kind: ScheduleKind = kind.parse().map_err(py_err)?;
    let s = make_schedule(t_steps, kind).map_err(py_err)?;
    Ok((
        s.betas().to_vec(),
        (1..=t_steps).map(|t| s.alpha(t)).collect(),
        s.alpha_bars().to_vec(),
    ))
}

/// Sample a curve spec (the CLI's JSON format) into N x 3 points.
#[pyfunction]
fn plan_trajectory(spec_json: &str) -> PyResult<Vec<[f64; 3]>> {
    let value: serde_json::Value =
        serde_json::from_str(spec_json).map_err(|e| PyValueError::new_err(e.to_string()))?;
    let traj = if let Some(segments) = value.get("segments") {
        let specs: Vec<trajplan::CurveSpec> = serde_json::from_value(segments.clone())
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
        trajplan::compose(&specs).map_err(py_err)?
    } else {
        let spec: trajplan::CurveSpec =
            serde_json::from_value(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
        trajplan::plan(&spec).map_err(py_err)?
    };
    Ok((0..traj.n_frames()).map(|i| traj.point(i)).collect())
}

/// Control-accuracy metrics of one sequence against one spec:
/// returns (avg_err, pose_dist, foot_skating_ratio).
#[pyfunction]
fn sequence_metrics(frames: Vec<Vec<[f64; 3]>>, spec_json: &str) -> PyResult<(f64, f64, f64)> {
    let g = motion_from_py(frames)?;
    let spec = spec_from_json(spec_json)?;
    let gen = [&g];
    let specs = [&spec];
    Ok((
        motiondiff::metrics::avg_err(&gen, &specs).map_err(py_err)?,
        motiondiff::metrics::pose_dist(&gen, &specs).map_err(py_err)?,
        motiondiff::metrics::foot_skating_ratio(&gen),
    ))
}

/// One synthetic corpus entry: (features, global frames, class label).
#[pyfunction]
fn synthetic_sample(
    index: usize,
    n_frames: usize,
    seed: u64,
) -> PyResult<(Vec<Vec<f64>>, Vec<Vec<[f64; 3]>>, usize)> {
    let s = dataset::gen_sample(index, n_frames, seed).map_err(py_err)?;
    Ok((
        features_to_py(&s.features),
        motion_to_py(&s.global),
        s.label,
    ))
}

/// A trained sampler loaded from checkpoint files.
#[pyclass]
struct MotionModel {
    base: motiondiff::denoiser::DenoiserParams,
    controlnet: Option<motiondiff::denoiser::ControlNetParams>,
    stats: motiondiff::norm::FeatureStats,
}

#[pymethods]
impl MotionModel {
    /// Load the base checkpoint and, optionally, the control branch.
    #[staticmethod]
    #[pyo3(signature = (base_path, controlnet_path=None))]
    fn load(base_path: &str, controlnet_path: Option<&str>) -> PyResult<Self> {
        let (base, stats) =
            motiondiff::checkpoint::load_base(std::path::Path::new(base_path)).map_err(py_err)?;
        let controlnet = match controlnet_path {
            Some(p) => Some(
                motiondiff::checkpoint::load_controlnet(std::path::Path::new(p), &base)
                    .map_err(py_err)?,
            ),
            None => None,
        };
        Ok(MotionModel {
            base,
            controlnet,
            stats,
        })
    }

    /// Diffusion step count the model was trained for.
    #[getter]
    fn t_steps(&self) -> usize {
        self.base.cfg.t_steps
    }

    /// Sample a motion under a control spec; returns global joint positions.
    #[pyo3(signature = (spec_json, seed=0, condition=0, tau=0.01, guidance_steps=1, guided=true, schedule="cosine"))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        &self,
        spec_json: &str,
        seed: u64,
        condition: usize,
        tau: f64,
        guidance_steps: usize,
        guided: bool,
        schedule: &str,
    ) -> PyResult<Vec<Vec<[f64; 3]>>> {
        let spec = spec_from_json(spec_json)?;
        let cfg = SampleConfig {
            seed,
            t_steps: self.base.cfg.t_steps,
            n_frames: spec.n_frames(),
            condition,
            schedule: schedule.parse().map_err(py_err)?,
            guidance: if guided {
                Some(GuidanceConfig {
                    tau,
                    steps_per_denoise: guidance_steps,
                    ..GuidanceConfig::default()
                })
            } else {
                None
            },
        };
        let model = SamplerModel {
            denoiser: &self.base,
            controlnet: self.controlnet.as_ref(),
            stats: &self.stats,
        };
        let features = sample_stream(&model, &cfg, Some(&spec), 0).map_err(py_err)?;
        Ok(motion_to_py(&kinematics::to_global(&features)))
    }
}

#[pymodule]
fn motiondiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(joint_names, m)?)?;
    m.add_function(wrap_pyfunction!(to_global, m)?)?;
    m.add_function(wrap_pyfunction!(from_global, m)?)?;
    m.add_function(wrap_pyfunction!(pelvis_center, m)?)?;
    m.add_function(wrap_pyfunction!(rotate_pose_yaw, m)?)?;
    m.add_function(wrap_pyfunction!(axis_transform, m)?)?;
    m.add_function(wrap_pyfunction!(traj_loss, m)?)?;
    m.add_function(wrap_pyfunction!(pose_loss, m)?)?;
    m.add_function(wrap_pyfunction!(combined_alpha, m)?)?;
    m.add_function(wrap_pyfunction!(loss_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(fd_gradient, m)?)?;
    m.add_function(wrap_pyfunction!(perturb, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_tables, m)?)?;
    m.add_function(wrap_pyfunction!(plan_trajectory, m)?)?;
    m.add_function(wrap_pyfunction!(sequence_metrics, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_sample, m)?)?;
    m.add_class::<MotionModel>()?;
    m.add("FEATURE_DIM", FEATURE_DIM)?;
    m.add("JOINT_COUNT", JOINT_COUNT)?;
    Ok(())
}
