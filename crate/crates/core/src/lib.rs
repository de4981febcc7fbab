//! Differentiable multi-view geometry for self-supervised depth and normal
//! recovery: inverse warping, edge-aware depth-normal consistency layers,
//! view-synthesis losses with hand-written vector-Jacobian products, and the
//! synthetic scenes and metrics used to verify them.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// Pixel and channel loops index several parallel buffers at once.
#![allow(clippy::needless_range_loop)]

pub mod camera;
pub mod consistency;
pub mod error;
pub mod gradcheck;
pub mod grid;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod objective;
pub mod optim;
pub mod sampling;
pub mod scene;

pub use camera::{CameraIntrinsics, PoseSE3, Twist};
pub use error::{Error, Result};
pub use grid::{Grid, Image, ScalarField, ValidMask, VectorField};
