//! Desk-scale state-space segmentation lab.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the dense array type, the reverse-mode tape and the
//!   neural primitives (3D convolution, instance norm, activations).
//! * [`ssm`] implements continuous/discrete state-space models, HiPPO
//!   initialisation, the recurrent and convolutional paths, the selective
//!   scan and the bi-directional MetaSSM block.
//! * [`scan_order`] realises volume flattening orders as permutations.
//! * [`network`] assembles the meta U-Net and its block variants.
//! * [`training`] and [`inference`] provide the optimisation loop and the
//!   sliding-window predictor.
//! * [`volume`] and [`config`] hold the on-disk formats.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast, clippy::needless_range_loop)]

pub mod config;
pub mod error;
pub mod inference;
pub mod network;
pub mod params;
pub mod scan_order;
pub mod ssm;
pub mod tensor;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
