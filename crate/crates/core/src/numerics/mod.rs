//! Random streams and the small dense linear-algebra kernels the rest of the
//! crate builds on.

mod linalg;
mod polyfit;
mod prng;
pub mod stats;

pub use linalg::{sym_eigen, sym_matrix_sqrt, SymmetricEigen};
pub use polyfit::{polyfit_least_squares, PolyFit};
pub use prng::{draw_gaussian, mix_seed, splitmix64, PrngStream, StreamId};
pub use stats::quantile_nearest_rank;
