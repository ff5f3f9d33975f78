//! Dynamic query evolution for bird's-eye-view detection.
//!
//! Pillar queries gather nearby feature points, cluster them with K-means,
//! and refine themselves through top-k attention over the cluster centres.
//! A lightweight temporal step fuses each query with its previous-frame
//! counterpart. Everything runs on synthetic scenes whose features encode
//! the ground-truth boxes, and is scored with nuScenes-style metrics.

// Range checks are written `!(x > 0.0)` so that NaN fails them.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod config;
pub mod detect;
pub mod dqem;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod io;
pub mod ltfm;
pub mod numerics;
pub mod scene;
pub mod suite;

pub use error::{Error, Result};
pub use exec::Execution;
