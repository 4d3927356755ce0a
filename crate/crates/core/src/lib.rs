//! Ricci flow laboratory for rotationally symmetric metrics on spheres.
//!
//! The crate integrates the flow to its first singular time, tracks
//! Perelman's entropy along the way, classifies the singularity and builds
//! blow-up sequences around it.

// Input checks are written `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod entropy;
pub mod error;
pub mod geometry;
pub mod flow;
pub mod numerics;
pub mod oracle;
pub mod singularity;

pub use error::{Error, Result};
