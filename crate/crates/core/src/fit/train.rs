use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{partition_from_heights, ChainContext, FitConfig, PartitionResult};
use crate::error::{Error, Result};
use crate::neural::{
    adam_step, mse, AdamConfig, AdamState, Network, NetworkSpec, RegressorModel, ShapeModel,
    ShapeModelStats, Tensor,
};
use crate::tps::ControlGrid;
use crate::util::derive_seed;
use crate::voxel::{downsample, BinaryMask, ScalarField};

/// Smallest dataset accepted for training.
pub const MIN_TRAINING_MASKS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaeTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Share of the masks held out for validation.
    pub validation_fraction: f64,
    /// Seeds the split and the per-epoch shuffles.
    pub seed: u64,
}

impl Default for CaeTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 150,
            learning_rate: 2e-3,
            batch_size: 4,
            validation_fraction: 0.2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegressorTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Input side of the regressor; the vertebra is mean-pooled down to it.
    pub input_side: usize,
    pub seed: u64,
    /// Soft-mask settings of the chain the regressor is trained through.
    pub fit: FitConfig,
}

impl Default for RegressorTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-3,
            batch_size: 4,
            input_side: 16,
            seed: 0,
            fit: FitConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RegressorTraining {
    pub model: RegressorModel,
    /// Mean chain loss of every epoch, as seen during the epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean-pools a mask to the `[1, d, h, w]` input shape of a network.
fn pooled_input(mask: &BinaryMask, input_shape: &[usize]) -> Result<Tensor> {
    pooled_field(&mask.to_field(), input_shape)
}

fn pooled_field(field: &ScalarField, input_shape: &[usize]) -> Result<Tensor> {
    let [nx, ny, nz] = field.meta().shape;
    let (d, h, w) = (input_shape[1], input_shape[2], input_shape[3]);
    let f = nx / w.max(1);
    if f == 0 || [w * f, h * f, d * f] != [nx, ny, nz] {
        return Err(Error::Shape(format!(
            "mask {:?} does not pool onto network input {input_shape:?}",
            field.meta().shape
        )));
    }
    Ok(Tensor::from_field(&downsample(field, f)?))
}

/// Regressor input for one vertebra.
pub fn regressor_input(vertebra: &BinaryMask, side: usize) -> Result<Tensor> {
    pooled_input(vertebra, &[1, side, side, side])
}

fn check_dataset(n: usize, what: &str) -> Result<()> {
    if n == 0 {
        return Err(Error::EmptyDataset(what.into()));
    }
    if n < MIN_TRAINING_MASKS {
        return Err(Error::InvalidArgument(format!(
            "{what}: {n} masks, at least {MIN_TRAINING_MASKS} needed"
        )));
    }
    Ok(())
}

fn mean_loss(net: &Network, inputs: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    for x in inputs {
        let (y, _) = net.forward(x)?;
        sum += mse(&y, x)?.0;
    }
    Ok(sum / inputs.len() as f64)
}

/// Trains an autoencoder on hard body masks and returns it frozen, with the
/// validation loss before and after training recorded in its stats.
pub fn pretrain_cae(
    bodies: &[BinaryMask],
    spec: NetworkSpec,
    cfg: &CaeTrainConfig,
) -> Result<ShapeModel> {
    pretrain(bodies.len(), spec, cfg, |i, shape| {
        pooled_input(&bodies[i], shape)
    })
}

/// [`pretrain_cae`] on soft body masks, such as [`Phantom::soft_body`], so
/// the training inputs look like the masks a fit feeds the model.
///
/// [`Phantom::soft_body`]: crate::phantom::Phantom::soft_body
pub fn pretrain_cae_soft(
    bodies: &[ScalarField],
    spec: NetworkSpec,
    cfg: &CaeTrainConfig,
) -> Result<ShapeModel> {
    pretrain(bodies.len(), spec, cfg, |i, shape| {
        pooled_field(&bodies[i], shape)
    })
}

fn pretrain(
    n: usize,
    spec: NetworkSpec,
    cfg: &CaeTrainConfig,
    input: impl Fn(usize, &[usize]) -> Result<Tensor>,
) -> Result<ShapeModel> {
    check_dataset(n, "autoencoder training set")?;
    if !(cfg.validation_fraction > 0.0 && cfg.validation_fraction < 1.0) || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument(
            "validation fraction must lie in (0, 1) and batch size be >= 1".into(),
        ));
    }
    let mut model = ShapeModel::new(spec)?;
    let inputs: Vec<Tensor> = (0..n)
        .map(|i| input(i, model.input_shape()))
        .collect::<Result<_>>()?;

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        cfg.seed,
        "cae/split",
    )));
    let n_val = ((cfg.validation_fraction * inputs.len() as f64).round() as usize)
        .clamp(1, inputs.len() - 1);
    let (train_idx, val_idx) = order.split_at(inputs.len() - n_val);
    let val: Vec<Tensor> = val_idx.iter().map(|&i| inputs[i].clone()).collect();
    let mut train_idx = train_idx.to_vec();

    let untrained = mean_loss(model.network(), &val)?;
    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(model.network().params().len());
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("cae/epoch/{epoch}")));
        train_idx.shuffle(&mut rng);
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut acc = vec![0.0; model.network().params().len()];
            for &i in batch {
                let (_, g) = model.training_loss(&inputs[i])?;
                acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g);
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            adam_step(model.network_mut()?.params_mut(), &acc, &mut state, &adam)?;
        }
    }
    model.stats = ShapeModelStats {
        validation_loss: Some(mean_loss(model.network(), &val)?),
        untrained_validation_loss: Some(untrained),
    };
    model.freeze();
    Ok(model)
}

/// Mean reconstruction loss of `cae` over hard masks.
pub fn mean_reconstruction_loss(cae: &ShapeModel, masks: &[BinaryMask]) -> Result<f64> {
    if masks.is_empty() {
        return Err(Error::EmptyDataset("no masks to reconstruct".into()));
    }
    let inputs: Vec<Tensor> = masks
        .iter()
        .map(|m| pooled_input(m, cae.input_shape()))
        .collect::<Result<_>>()?;
    mean_loss(cae.network(), &inputs)
}

fn heights_from_offsets(offsets: &[f64], mid: f64) -> Vec<f64> {
    offsets.iter().map(|o| mid + o).collect()
}

/// Trains a regressor end to end through the reconstruction loss of the
/// soft body mask it induces.
pub fn train_regressor(
    vertebrae: &[BinaryMask],
    grid: &Arc<ControlGrid>,
    cae: &ShapeModel,
    cfg: &RegressorTrainConfig,
) -> Result<RegressorTraining> {
    check_dataset(vertebrae.len(), "regressor training set")?;
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be >= 1".into()));
    }
    let spec = RegressorModel::default_spec(
        cfg.input_side,
        grid.len(),
        derive_seed(cfg.seed, "regressor/init"),
    )?;
    let mut model = RegressorModel::new(spec)?;
    let axis = cfg.fit.height_axis;
    let mut samples = Vec::with_capacity(vertebrae.len());
    for v in vertebrae {
        let ctx = ChainContext::new(v, grid.clone(), &cfg.fit)?;
        let mid = v.meta().center()[axis.index()];
        samples.push((regressor_input(v, cfg.input_side)?, ctx, mid));
    }

    let adam = AdamConfig::with_lr(cfg.learning_rate);
    let mut state = AdamState::new(model.network().params().len());
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &format!("regressor/epoch/{epoch}")));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let net = model.network();
            let mut acc = vec![0.0; net.params().len()];
            for &i in batch {
                let (x, ctx, mid) = &samples[i];
                let (y, tape) = net.forward(x)?;
                let heights = heights_from_offsets(y.data(), *mid);
                let out = ctx.cae_loss_and_grad(&heights, cae)?;
                if !out.loss.is_finite() {
                    return Err(Error::Diverged {
                        iteration: epoch,
                        trace: epoch_losses.iter().copied().enumerate().collect(),
                    });
                }
                epoch_sum += out.loss;
                let gy = Tensor::new(y.shape().to_vec(), out.grad)?;
                let (_, g) = net.backward(&tape, &gy)?;
                acc.iter_mut().zip(&g).for_each(|(a, g)| *a += g);
            }
            let scale = 1.0 / batch.len() as f64;
            acc.iter_mut().for_each(|a| *a *= scale);
            adam_step(model.network_mut().params_mut(), &acc, &mut state, &adam)?;
        }
        epoch_losses.push(epoch_sum / samples.len() as f64);
    }
    Ok(RegressorTraining {
        model,
        epoch_losses,
    })
}

/// Partition of one vertebra by the regressor's predicted surface.
pub fn predict_partition(
    model: &RegressorModel,
    vertebra: &BinaryMask,
    grid: &Arc<ControlGrid>,
    cfg: &FitConfig,
) -> Result<PartitionResult> {
    if model.n_controls() != grid.len() {
        return Err(Error::Length {
            expected: grid.len(),
            got: model.n_controls(),
        });
    }
    let side = model.input_shape()[1];
    let offsets = model.predict(&regressor_input(vertebra, side)?)?;
    let mid = vertebra.meta().center()[cfg.height_axis.index()];
    partition_from_heights(
        vertebra,
        grid,
        heights_from_offsets(&offsets, mid),
        cfg,
        Vec::new(),
    )
}
