//! Masked generative modeling over residual-quantized token grids.
//!
//! Vector sequences are quantized into `L × D` token grids by a residual
//! quantizer; a transformer with a mixture-of-Gaussians head predicts the
//! summed embeddings of masked depths, and the sampler fills a grid in a
//! fixed number of steps independent of `D`.

pub mod backbone;
pub mod error;
pub mod eval;
pub mod io;
pub mod masking;
pub mod mog;
pub mod numerics;
pub mod rvq;
pub mod sampler;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
