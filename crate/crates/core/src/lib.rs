//! Attention-map flow video classification.
//!
//! A frozen vision transformer runs on every frame of a clip. The per-block
//! attention logits of consecutive frames are differenced into per-patch
//! motion features ("AM flow") which condition trainable parallel adapters.
//! The adapters' bottleneck embeddings feed per-adapter temporal heads whose
//! logits are fused with a frozen-branch probe on the final frame.

pub mod adapters;
pub mod autodiff;
pub mod backbone;
pub mod checks;
pub mod config;
pub mod encoder;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod pca;
pub mod ppm;
pub mod rng;
pub mod run;
pub mod synth;
pub mod temporal;
pub mod tensor;
pub mod train;
pub mod weights;

pub use autodiff::{concat, elementwise, ElementwiseKind, Graph, Operand, ReduceKind, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
