//! Monocular 3D face reconstruction: morphable-model fitting to tracked
//! landmarks and multi-frame texture fusion into a registered isomap.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod fitting;
pub mod hog;
pub mod imaging;
pub mod landmarks;
pub mod model;
pub mod nnls;
pub mod pipeline;
pub mod raster;
pub mod synthetic;
pub mod texture;
pub mod tracker;

pub use error::{Error, Result};
