//! Bottom-up multi-person pose estimation at desk scale.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is
//! pure computation:
//!
//! - [`tensor`], [`tape`], [`gradcheck`], [`optim`]: a float64 tensor engine
//!   with reverse-mode differentiation, finite-difference checking and Adam.
//! - [`backbone`], [`grm`], [`mfa`], [`heads`]: the network. A shrunken
//!   multi-branch high-resolution backbone whose last top-branch block is a
//!   multi-branch dense step block, followed by global relation modeling
//!   over the stage outputs and 1x1 heatmap / tagmap heads.
//! - [`loss`]: Gaussian target encoding, heatmap MSE and the associative
//!   embedding pull/push loss.
//! - [`postprocess`]: peak detection, tag grouping and test-time averaging.
//! - [`metrics`]: OKS and COCO-style AP/AR.
//! - [`synth`]: deterministic stick-figure scenes and affine augmentation.
//! - [`trainer`]: the training loop and learning-rate schedule.
//!
//! File formats, the CLI and PNG handling live in the `posegraph` crate.

#![no_std]

extern crate alloc;

pub mod annotation;
pub mod backbone;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod grm;
pub mod heads;
pub mod kernels;
pub mod loss;
pub mod metrics;
pub mod mfa;
pub mod model;
pub mod nn;
pub mod optim;
pub mod param;
pub mod postprocess;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::PoseNet;
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{Mode, Tape, Var};
pub use tensor::Tensor;
