//! Multi-anatomy detection and statistical-shape-model correspondence
//! prediction on 3D volumes.
//!
//! The pipeline detects every anatomy class with strided center/radius/offset
//! maps, predicts image-space ("local") correspondences as bounded
//! displacements of a centered template, and maps them to population-space
//! ("world") correspondences with a differentiable rigid Procrustes fit.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod detection;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod heads;
pub mod hull;
pub mod io;
pub mod mesh;
pub mod model;
pub mod nn;
pub mod roi;
pub mod schedule;
pub mod synth;
pub mod template;
pub mod tps;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
