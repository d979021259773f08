//! Fitting pipelines: the differentiable chain from control heights to a
//! loss, per-instance height optimization, model training and evaluation.

mod chain;
mod optimize;
mod output;
mod report;
mod sweep;
mod train;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use chain::{chain_loss_and_grad, ChainContext, ChainGrad};
pub use optimize::{fit_heights_direct, fit_heights_supervised, partition_from_heights};
pub use output::{instance_dir, write_partition, write_report, write_run, OBJ_RESOLUTION};
pub use report::{evaluate, InstanceMetrics, MetricsReport, Summary};
pub use sweep::{run_grid, run_sweep, write_sweep, GridRun, SweepRow, SweepTable};
pub use train::{
    mean_reconstruction_loss, predict_partition, pretrain_cae, pretrain_cae_soft, regressor_input,
    train_regressor, CaeTrainConfig, RegressorTrainConfig, RegressorTraining,
};

use crate::error::{Error, Result};
use crate::tps::{ControlGrid, TpsSurface, DEFAULT_SV_CUTOFF};
use crate::voxel::{Axis, BinaryMask, GridMeta, ScalarField};

/// Control-point counts of the default sweep.
pub const DEFAULT_GRID_SIZES: [usize; 4] = [64, 100, 256, 1024];

/// Starting heights for an optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum HeightInit {
    /// Every control point at the middle of the vertebra's occupied range
    /// along the height axis.
    MidPlane,
    /// Every control point at the given coordinate (mm).
    Constant { mm: f64 },
    /// Explicit per-control-point heights (mm).
    Explicit { heights: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub grid_sizes: Vec<usize>,
    /// Sigmoid temperature of the soft mask, mm.
    pub tau_mm: f64,
    /// Optimizer steps; zero returns the initialization.
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub init: HeightInit,
    pub threshold: f64,
    pub height_axis: Axis,
    /// By default the body lies on the negative side of the surface
    /// (smaller height coordinate); `flip` swaps the sides.
    pub flip: bool,
    /// Weight of the optional bending-energy penalty on the heights.
    pub bending_weight: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            grid_sizes: DEFAULT_GRID_SIZES.to_vec(),
            tau_mm: 1.0,
            iterations: 300,
            learning_rate: 0.5,
            seed: 0,
            init: HeightInit::MidPlane,
            threshold: crate::voxel::DEFAULT_THRESHOLD,
            height_axis: Axis::Y,
            flip: false,
            bending_weight: 0.0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_mm.is_finite() && self.tau_mm > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "tau must be > 0, got {}",
                self.tau_mm
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidArgument(format!(
                "threshold must lie in [0, 1), got {}",
                self.threshold
            )));
        }
        if !(self.bending_weight.is_finite() && self.bending_weight >= 0.0) {
            return Err(Error::InvalidArgument("bending weight must be >= 0".into()));
        }
        for &n in &self.grid_sizes {
            grid_dims(n)?;
        }
        Ok(())
    }

    /// Copy recording the single `nx × nz` grid a run was fitted on.
    pub fn for_grid(&self, nx: usize, nz: usize) -> Self {
        Self {
            grid_sizes: vec![nx * nz],
            ..self.clone()
        }
    }

    /// Sign `s` of the body mask `σ(s·d/τ)`.
    pub(crate) fn body_sign(&self) -> f64 {
        if self.flip {
            1.0
        } else {
            -1.0
        }
    }
}

/// Most nearly square `nx × nz = n` with both sides at least 2, `nx <= nz`.
pub fn grid_dims(n: usize) -> Result<(usize, usize)> {
    let mut nx = (n as f64).sqrt().floor() as usize;
    while nx >= 2 {
        if n % nx == 0 {
            return Ok((nx, n / nx));
        }
        nx -= 1;
    }
    Err(Error::InvalidArgument(format!(
        "{n} control points cannot be laid out as an nx x nz grid with nx, nz >= 2"
    )))
}

/// Control grid with `nx × nz` points spanning the volume's in-plane extent.
pub fn volume_control_grid(
    meta: &GridMeta,
    axis: Axis,
    nx: usize,
    nz: usize,
) -> Result<ControlGrid> {
    ControlGrid::new(nx, nz, meta.in_plane_extent(axis)?, DEFAULT_SV_CUTOFF)
}

/// [`volume_control_grid`] for a control-point count, laid out by [`grid_dims`].
pub fn volume_control_grid_for(meta: &GridMeta, axis: Axis, n: usize) -> Result<Arc<ControlGrid>> {
    let (nx, nz) = grid_dims(n)?;
    Ok(Arc::new(volume_control_grid(meta, axis, nx, nz)?))
}

/// Middle of the occupied range along `axis`, mm; the volume centre when empty.
pub fn occupied_mid_plane(mask: &BinaryMask, axis: Axis) -> f64 {
    let meta = mask.meta();
    let h = axis.index();
    match mask.occupied_range(axis) {
        Some((lo, hi)) => 0.5 * (meta.axis_coord(h, lo) + meta.axis_coord(h, hi)),
        None => meta.center()[h],
    }
}

pub(crate) fn initial_heights(
    init: &HeightInit,
    vertebra: &BinaryMask,
    grid: &ControlGrid,
    axis: Axis,
) -> Result<Vec<f64>> {
    match init {
        HeightInit::MidPlane => Ok(vec![occupied_mid_plane(vertebra, axis); grid.len()]),
        HeightInit::Constant { mm } => Ok(vec![*mm; grid.len()]),
        HeightInit::Explicit { heights } => {
            if heights.len() != grid.len() {
                return Err(Error::Length {
                    expected: grid.len(),
                    got: heights.len(),
                });
            }
            Ok(heights.clone())
        }
    }
}

/// Outcome of partitioning one vertebra.
#[derive(Debug, Clone)]
pub struct PartitionResult {
    pub surface: TpsSurface,
    pub height_axis: Axis,
    pub body_soft: ScalarField,
    pub posterior_soft: ScalarField,
    pub body_hard: BinaryMask,
    pub posterior_hard: BinaryMask,
    /// `(iteration, loss)` for every evaluated iterate.
    pub loss_trace: Vec<(usize, f64)>,
}

impl PartitionResult {
    /// Largest `|body_soft + posterior_soft - vertebra|` over all voxels.
    pub fn partition_error(&self, vertebra: &BinaryMask) -> f64 {
        self.body_soft
            .data()
            .iter()
            .zip(self.posterior_soft.data())
            .zip(vertebra.data())
            .map(|((b, p), &v)| (b + p - if v { 1.0 } else { 0.0 }).abs())
            .fold(0.0, f64::max)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.loss_trace
            .iter()
            .map(|&(_, l)| l)
            .fold(None, |m: Option<f64>, l| Some(m.map_or(l, |m| m.min(l))))
    }
}
