//! Multi-frame self-supervised monocular depth estimation with a
//! motion-aware plane-sweep cost volume.
//!
//! The pipeline estimates metric depth for a target frame from a pair of
//! monocular video frames. A coarse depth network, a pose network, and a
//! pluggable optical-flow provider feed a second stage that detects moving
//! pixels, rebuilds a pseudo-static reference frame, sweeps depth hypothesis
//! planes into a matching cost volume, and decodes refined depth through an
//! attention-based multi-branch network. Training is fully self-supervised
//! from photometric reconstruction, edge-aware smoothness, and
//! coarse-to-fine consistency.

pub mod autodiff;
pub mod costvolume;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod networks;
pub mod pipeline;
pub mod synthdata;

#[cfg(test)]
pub(crate) mod testsupport;

pub use error::{Error, Result};
