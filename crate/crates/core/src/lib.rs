//! Synthetic facial-forgery corpora with pixel-exact masks, a shared-encoder
//! network that jointly detects manipulation and segments the manipulated
//! region, and the metrics and activation maps used to evaluate it.
//!
//! The crate is organised bottom-up:
//!
//! * [`forge`] builds images, masks and manifests.
//! * [`nn`] holds the layer kernels; [`model`] assembles them into the
//!   two-branch network and [`checkpoint`] persists it.
//! * [`objective`] implements the detection/segmentation losses and the
//!   finite-difference gradient checker.
//! * [`train`] runs the joint (or single-branch) optimisation loop.
//! * [`metrics`] and [`cam`] score and visualise trained models.
//! * [`config`] and [`pipeline`] wire everything behind one run directory.

pub mod cam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod exec;
pub mod forge;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod pipeline;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
