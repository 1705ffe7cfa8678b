//! Referring camouflaged-object segmentation on a small reverse-mode tensor
//! engine.
//!
//! The network encodes a camouflaged image and, optionally, salient reference
//! images or sentence embeddings of the target category, fuses the reference
//! information into the image's feature pyramid, and decodes four logit maps
//! top-down.

pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod experiment;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod owca;
pub mod pgm;
pub mod rfa;
pub mod rif;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use graph::{Graph, Mode, Var};
pub use tensor::Tensor;
