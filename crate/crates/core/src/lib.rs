//! Objectness-driven adaptive label smoothing.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: boxes, binary masks, crop/scale/flip transforms and the
//!   two objectness estimators (box intersection and mask pixel counting).
//! - [`labeling`]: hard, uniformly smoothed, adaptive and context-only
//!   target vectors.
//! - [`loss`]: softmax, cross-entropy against arbitrary targets and its
//!   gradient with respect to the logits.
//! - [`synthdata`]: a deterministic synthetic dataset in which backgrounds
//!   are correlated with the object class, plus the object-removal and
//!   random-crop machinery.
//! - [`model`]: a small convolutional classifier with hand-written
//!   backpropagation and an SGD-with-momentum trainer.
//! - [`calibration`]: accuracy, ECE, MCE, over/underconfidence, average
//!   confidence, mean deviation from objectness and reliability bins.
//! - [`config`], [`io`] and [`pipeline`]: the file formats and the staged
//!   experiment driven by the `als` binary.

pub mod calibration;
pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod labeling;
pub mod loss;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
