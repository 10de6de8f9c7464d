//! Differentiable point-cloud transformer backbone.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`autograd`], [`ops`], [`nn`]: dense storage, reverse-mode
//!   differentiation and the dense layers everything else is built from.
//! - [`point_ops`]: farthest point sampling, ball query, grouping and
//!   inverse-distance feature propagation.
//! - [`attention`]: multi-head attention with relative positional bias and
//!   optional low-rank key/value projection.
//! - [`blocks`]: local, local-global and global transformer stages with
//!   attention-weighted centroid refinement.
//! - [`backbone`]: multi-resolution assembly, configs and presets.
//! - [`gradcheck`], [`gradsuite`]: finite-difference verification and the
//!   catalogue of checked components used by tests and the CLI.

pub mod attention;
pub mod autograd;
pub mod backbone;
pub mod blocks;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod nn;
pub mod ops;
pub mod point_ops;
pub mod tensor;

pub use autograd::{no_grad, Var};
pub use error::{Error, Result};
pub use point_ops::PointCloud;
pub use tensor::{Precision, Real, Tensor};
