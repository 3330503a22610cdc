//! Few-shot 3D anomaly detection over RGB images paired with organized point
//! clouds.
//!
//! The pipeline renders a point grid into multiple views, synthesizes anomalous
//! counterparts of normal training images, passes everything through a frozen
//! encoder, and trains small adapters, a coarse-to-fine decoder and a
//! multi-view fusion module on top. Inference produces a pixel anomaly map and
//! an image-level score; [`metrics`] evaluates both.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adaptation;
pub mod autodiff;
pub mod cli;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod inference;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod render;
pub mod scoring;
pub mod synth;
pub mod toy;
pub mod training;

pub use error::{Error, Result};

/// `H×W×3` image with channel values in `[0, 1]`.
pub type ColorImage = ndarray::Array3<f64>;

/// `H×W` binary mask.
pub type Mask = ndarray::Array2<bool>;
