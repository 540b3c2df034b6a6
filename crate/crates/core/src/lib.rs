//! Adversarial object fusion against dense vision-language perception.
//!
//! This crate holds the numerical core: synthetic point-cloud scenes, pinhole
//! rendering, victim alignment, the toy dense encoder, the 3D/2D losses, the
//! per-view Adam optimizer, multi-view fusion, and the evaluation metrics.
//! It is `no_std` and only needs an allocator; file formats and the command
//! line live in the `advof` crate.

#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
#[macro_use]
extern crate std;

pub mod alignment;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod math;
pub mod optimizer;
pub mod perception;
pub mod scene;
mod spatial;

pub use error::{Error, Result};
pub use image::Image;
pub use math::Vec3;
