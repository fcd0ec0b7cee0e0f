//! Desk-scale grasp synthesis around a relative-transform graph.
//!
//! The crate is organized bottom-up:
//!
//! * [`se3`] — rigid-transform math: exp/log between twist coordinates and
//!   rotation+translation pairs, geodesic distances, and the analytic
//!   Jacobians the guidance and IK layers need.
//! * [`kinematics`] — a URDF subset parser, forward kinematics over the
//!   joint tree, geometric Jacobians, and cross-hand similarity scores.
//! * [`pointcloud`] — farthest-point sampling, patch partitions, basis-point
//!   distance encodings, and `.xyz`/`.xyzb` file IO.
//! * [`graph`] — the object/link node sets, relative-transform edge tensors,
//!   and the JSON round-trip with edge-consistency verification.
//! * [`diffusion`] — the noise schedule, forward noising, the deterministic
//!   implicit sampler with stochastic breaks, and gradient guidance.
//! * [`denoiser`] — a trainable graph-transformer noise predictor with a
//!   hand-rolled reverse-mode tape, Adam training, and checkpoints.
//! * [`iksolver`] — damped least-squares inverse kinematics with joint
//!   limits and a jointly solved base transform.
//! * [`synthdata`] — synthetic hands, primitive objects, analytic pinch
//!   demonstrations, and the on-disk dataset layout.
//!
//! All numerics are `f64` and all randomness flows through explicitly seeded
//! generators so that every pipeline output is reproducible bit for bit.

pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod graph;
pub mod iksolver;
pub mod kinematics;
pub mod pointcloud;
pub mod se3;
pub mod synthdata;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
