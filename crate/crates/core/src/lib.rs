//! Open-set object detection driven by positive and negative visual prompts.
//!
//! The crate is organised bottom-up:
//!
//! - [`numcore`]: dense tensors, a reverse-mode gradient tape and a finite-difference checker.
//! - [`geometry`]: boxes, IoU/GIoU and the jitter transforms used to synthesise prompts.
//! - [`prompt`]: prompt synthesis, the box-restricted prompt encoder, batch aggregation and
//!   top-K negative selection.
//! - [`scoring`]: query/prompt similarities and negative-suppressed probability calibration.
//! - [`losses`]: focal, margin hinge, L1 and GIoU objectives.
//! - [`matching`]: Hungarian assignment with the composite detection cost.
//! - [`dataengine`]: synthetic long-tailed scenes with confusable category pairs.
//! - [`detector`]: the toy query-based detector, its training loop and checkpoints.
//! - [`evalkit`]: COCO-style AP, counting MAE and ablation sweeps.

pub mod dataengine;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod geometry;
pub mod losses;
pub mod matching;
pub mod numcore;
pub mod prompt;
pub mod rng;
pub mod scoring;

pub use error::{Error, Result};
