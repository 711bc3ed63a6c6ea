//! Rate-distortion optimized quantization (RDOQ) lab.
//!
//! The crate covers the whole offline loop:
//!
//! * [`codec`]: DC prediction, orthonormal DCT, QP mapping, scalar quantizers.
//! * [`rate`]: an additive, bit-exact rate model over 4×4 coefficient groups.
//! * [`search`]: RD cost, a coordinate-descent RDOQ baseline, the greedy
//!   per-group exhaustive refinement used to produce labels, and a brute-force
//!   oracle.
//! * [`nn`]: a small CPU network stack with a fully-convolutional and an
//!   auto-regressive quantization refiner trained by imitation.
//! * [`dataset`]: frame ingest, block extraction, labeling, binary datasets.
//! * [`eval`]: RD comparisons, PSNR, BD-rate.
//! * [`pipeline`]: the end-to-end drivers used by the command-line tool.

pub mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod nn;
pub mod pipeline;
pub mod rate;
pub mod search;

pub use error::{Error, Result};
