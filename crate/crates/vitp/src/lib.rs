//! Point-prompted mask classification at desk scale.
//!
//! A two-stage segmentation pipeline: an external (here: simulated) mask
//! generator proposes class-agnostic soft masks, and a point-prompted
//! transformer classifier relabels each proposal at a chosen in-mask point.
//! The two score sources are blended with a geometric ensemble and the
//! result is evaluated with PQ / AP / mIoU, including ground-truth
//! relabeling upper bounds.

pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod synth;
pub mod trainer;
pub mod tensor;
pub mod util;

pub use error::{Error, Result};
