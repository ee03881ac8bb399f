//! Core of a set-prediction temporal action detector.
//!
//! A video arrives as a `T×C_V` feature sequence; a transformer encoder with
//! temporal deformable attention adds context, a decoder turns a fixed set of
//! learnable queries into (class, segment) predictions, and an actionness
//! head rescores each prediction from RoIAligned encoder features. Training
//! assigns ground truth to predictions with the Hungarian algorithm, so no
//! non-maximum suppression is needed at inference.
//!
//! The crate is `no_std` with `alloc`. The `std` feature (on by default) only
//! enables runtime CPU feature detection in the matrix-multiply backend.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod data;
pub mod error;
pub mod eval;
pub mod flops;
pub mod graph;
mod kernels;
pub mod matching;
pub mod model;
pub mod optim;
pub mod params;
pub mod segment;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use graph::{inverse_sigmoid, sigmoid, Graph, Var};
pub use kernels::RoiAlignSpec;
pub use params::{Binder, ParamId, ParamStore};
pub use segment::Segment;
pub use tensor::{Scalar, Tensor, TensorError};
