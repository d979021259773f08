use std::sync::Arc;

use super::{initial_heights, ChainContext, ChainGrad, FitConfig, PartitionResult};
use crate::error::{Error, Result};
use crate::neural::{adam_step, AdamConfig, AdamState, ShapeModel};
use crate::tps::{ControlGrid, TpsSurface};
use crate::voxel::{
    apply_mask, signed_axial_distance_field, soft_mask, threshold, BinaryMask, ScalarField,
};

/// Builds the soft and hard partition of `vertebra` by the surface through `heights`.
pub fn partition_from_heights(
    vertebra: &BinaryMask,
    grid: &Arc<ControlGrid>,
    heights: Vec<f64>,
    cfg: &FitConfig,
    loss_trace: Vec<(usize, f64)>,
) -> Result<PartitionResult> {
    cfg.validate()?;
    let surface = TpsSurface::solve(grid.clone(), heights)?;
    let meta = *vertebra.meta();
    let d = signed_axial_distance_field(&surface, &meta, cfg.height_axis);
    let body_soft = apply_mask(vertebra, &soft_mask(&d, cfg.tau_mm, !cfg.flip)?)?;
    let posterior: Vec<f64> = vertebra
        .data()
        .iter()
        .zip(body_soft.data())
        .map(|(&v, b)| if v { 1.0 - b } else { 0.0 })
        .collect();
    let posterior_soft = ScalarField::new(meta, posterior)?;
    Ok(PartitionResult {
        body_hard: threshold(&body_soft, cfg.threshold),
        posterior_hard: threshold(&posterior_soft, cfg.threshold),
        surface,
        height_axis: cfg.height_axis,
        body_soft,
        posterior_soft,
        loss_trace,
    })
}

/// Adam on the heights; returns the best iterate and the loss trace.
///
/// The trace holds one entry per evaluated iterate, the last one after the
/// final step, so `iterations` steps give `iterations + 1` entries.
fn descend(
    mut heights: Vec<f64>,
    cfg: &FitConfig,
    mut loss_and_grad: impl FnMut(&[f64]) -> Result<ChainGrad>,
) -> Result<(Vec<f64>, Vec<(usize, f64)>)> {
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(heights.len());
    let mut trace = Vec::with_capacity(cfg.iterations + 1);
    let mut best = (f64::INFINITY, heights.clone());
    for it in 0..=cfg.iterations {
        let out = loss_and_grad(&heights)?;
        if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged {
                iteration: it,
                trace,
            });
        }
        trace.push((it, out.loss));
        if out.loss < best.0 {
            best = (out.loss, heights.clone());
        }
        if it < cfg.iterations {
            adam_step(&mut heights, &out.grad, &mut state, &adam)?;
        }
    }
    Ok((best.1, trace))
}

/// Fits the surface to one vertebra by minimizing the shape model's
/// reconstruction loss of the soft body mask.
pub fn fit_heights_direct(
    vertebra: &BinaryMask,
    grid: &Arc<ControlGrid>,
    cae: &ShapeModel,
    cfg: &FitConfig,
) -> Result<PartitionResult> {
    let ctx = ChainContext::new(vertebra, grid.clone(), cfg)?;
    let init = initial_heights(&cfg.init, vertebra, grid, cfg.height_axis)?;
    let (heights, trace) = descend(init, cfg, |h| ctx.cae_loss_and_grad(h, cae))?;
    partition_from_heights(vertebra, grid, heights, cfg, trace)
}

/// Fits the surface so that the soft body mask matches a reference body mask.
pub fn fit_heights_supervised(
    vertebra: &BinaryMask,
    body_ref: &BinaryMask,
    grid: &Arc<ControlGrid>,
    cfg: &FitConfig,
) -> Result<PartitionResult> {
    let ctx = ChainContext::new(vertebra, grid.clone(), cfg)?;
    ctx.meta().ensure_same(body_ref.meta())?;
    let init = initial_heights(&cfg.init, vertebra, grid, cfg.height_axis)?;
    let (heights, trace) = descend(init, cfg, |h| ctx.supervised_loss_and_grad(h, body_ref))?;
    partition_from_heights(vertebra, grid, heights, cfg, trace)
}
