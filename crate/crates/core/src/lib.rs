#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod appearance;
pub mod articulation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod deformation;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod knn;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod params;
pub mod ply;
pub mod render;
pub mod scene;
pub mod synth;
pub mod template;
pub mod train;

pub use error::{Error, Result};
