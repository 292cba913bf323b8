//! Multi-level-of-detail animatable Gaussian head avatars.
//!
//! The pipeline turns a single portrait into a set of 3D Gaussians at several
//! subdivision levels: a parametric head is morphed and skinned, global
//! features come from cross-attention over image tokens, local features are
//! sampled by projection and fused only where the depth buffer sees the
//! vertex, and the fused features are regressed into Gaussian attributes for
//! the head plus an image-aligned shoulder layer. Reenactment only moves the
//! head Gaussians; rendering is a deterministic tile-based splatter.

pub mod archive;
pub mod avatar;
pub mod config;
pub mod error;
pub mod gaussians;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod mesh;
pub mod model;
pub mod neural;
pub mod render;
pub mod subdivision;
pub mod verify;
pub mod visibility;

pub use error::{Error, Result};
