//! FasterX: a lightweight anchor-free detector for small objects in aerial
//! imagery, with a self-contained CPU autodiff engine.

pub mod assignment;
pub mod autograd;
pub mod backbone;
pub mod backend;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradcheck;
pub mod heads;
pub mod kernels;
pub mod losses;
pub mod model;
pub mod neck;
pub mod nn;
pub mod plot;
pub mod postprocess;
pub mod profiler;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
