//! Label-free 6D object pose learning toolkit.
//!
//! The crate implements a two-stage training scheme on top of exact,
//! differentiable geometry kernels: pose-consistency self-supervision through
//! a differentiable renderer and differentiable PnP, followed by
//! warp-alignment fine-tuning via photometric consistency between warped
//! object views. Everything is double precision and deterministic for a
//! fixed seed.

pub mod error;
pub mod geometry;
pub mod losses;
pub mod pnp;
pub mod representation;
pub mod warp;
pub mod renderer;

pub use error::{Error, Result};
