//! Earth-topology-aware shifted-window attention ("Searth" blocks), the
//! encoder–core–decoder forecaster built from them, and relay autoregressive
//! fine-tuning, all on a small self-contained reverse-mode autodiff engine.

pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod gradcheck;
pub mod io;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use autodiff::{backward, grad_check, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use geometry::{AttentionMask, LatLonGrid, MaskMode};
pub use model::{Model, ModelConfig, NormStats};
pub use scalar::{Precision, Scalar};
pub use tensor::Tensor;
