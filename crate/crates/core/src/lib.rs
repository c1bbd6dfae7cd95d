//! Flow-matching segmentation of thin curvilinear structures.
//!
//! A time-conditioned U-Net learns a per-pixel vector field that carries a
//! Gaussian noise mask to the ground-truth mask along a straight path;
//! inference integrates the field with forward Euler and squashes the final
//! state through a sigmoid. The crate also ships a synthetic filament
//! generator, the training loop (AdamW, cosine schedule, early stopping,
//! checkpoints), a same-backbone single-pass U-Net baseline and the
//! evaluation metrics used to compare them.

pub mod data;
pub mod datagen;
pub mod domain;
pub mod error;
pub mod eval;
pub mod flow;
pub mod infer;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod real;
pub mod seed;
pub mod train;

pub use domain::{normalize_image, sigmoid, threshold, FlowState, Grid, Image, Mask, ProbMap, TimeScalar, VectorField};
pub use error::{Error, Result};
pub use real::Real;
