//! Workbench for growing long planning trajectories out of short ones.
//!
//! The crate bundles everything needed to run the full pipeline on the
//! built-in point-mass mazes:
//!
//! * [`tensor`] / [`graph`] / [`nn`] — a small dense-tensor engine with
//!   reverse-mode autodiff and an Adam optimizer; every learned model in the
//!   crate sits on top of it.
//! * [`maze`] — maze layouts, point-mass dynamics, PD control, scoring.
//! * [`dataset`] — trajectory containers, base-data collection, segment
//!   splitting, persistence, and dataset metrics.
//! * [`diffusion`] — noise schedules, denoising samplers with inpainting
//!   constraints, optional gradient guidance, and the training loop.
//! * [`models`] — inverse dynamics, reward, and plan-depth predictors.
//! * [`pte`] — progressive trajectory extension: bridge synthesis,
//!   reachability filtering, and the linear/exponential round schedulers.
//! * [`planner`] — the recursive level-conditioned planner, adaptive start
//!   level selection, and the replanning control loop.
//! * [`harness`] — experiment configuration and the collect → stitch →
//!   train → evaluate pipeline.

pub mod checkpoint;
pub mod dataset;
pub mod diffusion;
mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod maze;
pub mod models;
pub mod nn;
pub mod planner;
pub mod pte;
pub mod rng;
pub mod tensor;
pub mod unet;

pub use error::{Error, Result};
