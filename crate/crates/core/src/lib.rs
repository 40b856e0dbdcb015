//! Coarse-to-fine RGB/infrared fusion at desk scale.
//!
//! The crate trains a small two-stream detector whose fusion path runs
//! in two stages: a frequency-domain cleanup that predicts and applies
//! a per-modality spectral filter, then a per-scale gated mixture of
//! expert networks that weighs the two modalities before fusing them
//! with a shared representation. A synthetic paired-scene generator,
//! a toy detection head, and mAP / log-average-miss-rate evaluators
//! close the loop so a training run can be scored end to end.

pub mod backbone;
pub mod config;
pub mod data;
pub mod detect;
pub mod dfs;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod pnm;
pub mod rng;
pub mod rsr;
pub mod spectral;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
