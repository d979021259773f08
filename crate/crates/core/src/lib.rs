//! Partitioning of binary voxel masks by a differentiable thin-plate-spline
//! height surface.
//!
//! The pieces, bottom-up:
//!
//! - [`tps`]: control lattice, precomputed pseudo-inverse, surfaces, Jacobians.
//! - [`voxel`]: volumes, distance-to-surface fields, sigmoid soft masks, Dice and Hausdorff.
//! - [`phantom`]: synthetic vertebra-like masks with a known partition boundary.
//! - [`neural`]: a small reverse-mode network engine, the autoencoder shape model and the height regressor.
//! - [`fit`]: the differentiable chain from heights to reconstruction loss, fitting, training and evaluation.

pub mod error;
pub mod fit;
pub mod neural;
pub mod phantom;
pub mod tps;
pub mod util;
pub mod voxel;

pub use error::{Error, Result};
pub use fit::{FitConfig, MetricsReport, PartitionResult};
pub use tps::{ControlGrid, Extent, SurfaceDoc, TpsSurface};
pub use voxel::{Axis, BinaryMask, GridMeta, ScalarField};
