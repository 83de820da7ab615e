//! Interior texture synthesis for Gaussian splat models.
//!
//! Hollow splat models are filled with opaque atomic particles, the new
//! particles' colors are trained against cross-section reference images,
//! and particles no view ever reached are recolored from trained neighbors.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cutplane;
pub mod eval;
pub mod fill;
pub mod fixtures;
pub mod imaging;
pub mod loss;
pub mod meta;
pub mod par;
pub mod pipeline;
pub mod ply;
pub mod provider;
pub mod render;
pub mod smooth;
pub mod splat;
pub mod texture;
pub mod train;
