//! Multi-view projective convolutional segmentation of 3D meshes.

pub mod crf;
pub mod error;
pub mod mesh;
pub mod net;
pub mod pipeline;
pub mod projection;

pub use error::{Error, Result};
pub mod render;
pub mod synth;
pub mod train;
pub mod view_select;
