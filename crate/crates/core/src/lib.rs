//! Blind hyperspectral unmixing toolkit.
//!
//! Two cooperating pieces:
//!
//! * a deterministic endmember extractor that searches for the maximum-volume
//!   simplex of the projected pixel cloud ([`psvm`]), and
//! * an unrolled 3D convolutional sparse-coding autoencoder whose encoder
//!   estimates abundance maps and whose pointwise decoder carries the
//!   endmember matrix ([`cscnet`], [`training`]).
//!
//! Supporting modules provide cube/matrix data types with file I/O and
//! synthetic-scene generation ([`hsi_data`]), the linear-algebra subroutines
//! behind the extractor ([`subspace`]), and ground-truth evaluation with
//! permutation matching ([`metrics`]).

pub mod cscnet;
pub mod training;
pub mod error;
pub mod hsi_data;
pub mod metrics;
pub mod psvm;
pub mod subspace;

pub use error::{Result, UnmixError};
pub use hsi_data::{
    AbundanceMaps, EndmemberMatrix, HsiCube, NoiseLevel, PixelMatrix, SyntheticScene,
};
