//! Core of a semi-supervised segmentation trainer that learns pixel-wise
//! uncertainty.
//!
//! A prototype classifier scores every pixel embedding by cosine similarity
//! to per-class anchors. A scalar threshold `gamma` on the best score splits
//! pixels into certain and uncertain; each training step re-solves `gamma` so
//! that the certain fraction matches the fraction of pixels whose predicted
//! class agrees across two augmented views of an unlabelled image, then
//! maximises cross-view agreement on the certain pixels only.
//!
//! The crate is `no_std` (with `alloc`) and has no IO: file formats, the
//! command line and configuration loading live in the `gssl` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod resample;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod uncertainty;

pub use autodiff::{Graph, Primitive, Var};
pub use error::{Error, Result};
pub use resample::Region;
pub use tensor::Tensor;
