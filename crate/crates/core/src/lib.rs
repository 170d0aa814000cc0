//! Fine-grained probabilistic noise on token embeddings for mitigating
//! training-data replication in conditional diffusion models, together with
//! a desk-scale diffusion model, a synthetic duplicated corpus and the
//! replication / quality metrics used to study it.

pub mod dataset;
pub mod denoiser;
pub mod diffusion;
pub mod embeddings;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod numerics;
pub mod stats_verify;

pub use error::{Error, Result};
