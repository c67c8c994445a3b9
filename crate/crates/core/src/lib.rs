//! Sparse keypoint matching with a normalized two-stream transformer.
//!
//! Pipeline: backbone feature maps → bilinear keypoint features → spline
//! graph convolution over a Delaunay graph → normalized transformer decoder
//! → cosine affinities → log-space Sinkhorn → row-argmax matching.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod features;
pub mod geometry;
pub mod gnn;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod matching;
pub mod model;
pub mod params;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
pub use params::{Gradients, ParameterStore};
pub use tensor::Tensor;
