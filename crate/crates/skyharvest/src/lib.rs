//! Multi-UAV IoT data-harvesting workbench.
//!
//! A team of battery-limited UAVs collects data from ground devices over
//! a 3D city map. The crate provides:
//!
//! - [`world`]: raster maps, line-of-sight raycasting, distance fields;
//! - [`channel`]: the segmented log-distance radio model;
//! - [`env`]: the multi-agent simulator with TDMA max-rate scheduling
//!   and a battery-aware safety controller;
//! - [`nnkernel`]: a small double-precision differentiable kernel;
//! - [`learner`]: recurrent Q-learners with a monotonic mixing network;
//! - [`envlearn`]: channel fitting and swarm-search device localization
//!   from flight measurements;
//! - [`federation`]: the model-aided federated training loop;
//! - [`config`], [`metrics`], [`plot`], [`checkpoint`]: experiment
//!   plumbing for the `skyharvest` CLI.

pub mod channel;
pub mod checkpoint;
pub mod config;
pub mod env;
pub mod envlearn;
pub mod error;
pub mod federation;
pub mod learner;
pub mod metrics;
pub mod nnkernel;
pub mod plot;
pub mod seed;
pub mod world;

pub use error::{Error, Result};
