//! Trajectory- and keyframe-pose-guided motion diffusion at desk scale.
//!
//! The crate covers the full pipeline:
//!
//! - [`motion`] / [`skeleton`] / [`kinematics`]: the 22-joint skeleton, the
//!   67-channel root-relative motion representation, and the differentiable
//!   local-to-global transform with its inverse.
//! - [`guidance`]: analytic trajectory/pose losses, the pose alignment rule,
//!   the dynamically weighted combined gradient, and a finite-difference
//!   oracle for checking it.
//! - [`schedule`] / [`diffusion`]: DDPM noise schedules, forward noising, the
//!   clean-sample-prediction reverse sampler, and the guided sampling loop.
//! - [`denoiser`] / [`nn`]: a small transformer-encoder denoiser plus a
//!   control branch (trainable copy of the encoder with zero-initialized
//!   injection projections) conditioned on encoded trajectory/pose features.
//! - [`dataset`] / [`train`]: procedural synthetic motion corpus, control
//!   sampling at fixed sparsity levels, rotation augmentation, and the
//!   two-phase training loop (base model, then control branch).
//! - [`metrics`]: control-accuracy metrics (trajectory/location/average
//!   error, foot skating ratio, pelvis-centered pose distance).
//! - [`trajplan`]: parametric curve trajectory planner with multi-segment
//!   composition.
//! - [`pose_import`]: canonicalization of external pose-estimator output into
//!   the 22-joint representation.
//! - [`checkpoint`] / [`bvh`] / [`manifest`]: file formats.

pub mod bvh;
pub mod checkpoint;
pub mod control;
pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod gradcheck;
pub mod guidance;
pub mod kinematics;
pub mod manifest;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod norm;
pub mod pose_import;
pub mod schedule;
pub mod skeleton;
pub mod train;
pub mod trajplan;

pub use error::{Error, Result};
