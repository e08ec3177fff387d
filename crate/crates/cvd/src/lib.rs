//! Desk-scale laboratory for content-viewpoint disentangled cross-view
//! image retrieval: a seeded autodiff tape, a small Siamese conv model,
//! the disentanglement/reconstruction/contrastive objectives, a
//! factor-controlled synthetic dataset, and retrieval evaluation.

pub mod cli;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod tensor;

pub use error::{CvdError, Result};
pub use tensor::{Graph, Tensor};
