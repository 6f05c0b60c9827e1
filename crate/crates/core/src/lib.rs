//! Diffusion-transformer reconstruction of 3D voxel flow fields from
//! arbitrary sets of 2D slices.
//!
//! The crate is `no_std` + `alloc` when built without the default `std`
//! feature. File formats, wall-clock timing and the command line live in the
//! companion `flowdit` crate.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(rust_2018_idioms)]
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

extern crate alloc;

pub mod attention;
pub mod autograd;
pub mod diffusion;
pub mod error;
pub mod flowgen;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use crate::autograd::{Grads, Graph, Var};
pub use crate::error::{Error, Result};
pub use crate::scalar::Scalar;
pub use crate::tensor::Tensor;
